"""Error types for the exporter."""


class ExportError(Exception):
    """Bad inputs, unreadable files, or an unusable checkpoint."""


class UsageError(Exception):
    """Malformed command line."""
