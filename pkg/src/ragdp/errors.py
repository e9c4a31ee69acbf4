"""Exception types shared across the package."""


class RagdpError(Exception):
    pass


class FormatError(RagdpError):
    """File is not of the expected kind or version."""


class CorruptedFileError(FormatError):
    """Checksum does not match the file contents."""


class MetadataMismatchError(RagdpError):
    """Artifacts were built for incompatible settings (horizons, dimensions, dataset)."""
