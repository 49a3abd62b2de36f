"""Error taxonomy, kept parallel to the engine's exit-code conventions."""


class ExportError(Exception):
    """Base for everything this tool raises on purpose."""


class ManifestError(ExportError):
    """The manifest is structurally wrong for the declared network."""


class UnmappedLayerError(ManifestError):
    """Required layers with no checkpoint mapping. Carries the names."""

    def __init__(self, missing: dict):
        self.layers = missing  # section -> [layer names]
        parts = [f"{section}: {', '.join(names)}" for section, names in missing.items()]
        super().__init__("manifest leaves layers unmapped: " + "; ".join(parts))


class MissingTensorError(ExportError):
    """The checkpoint lacks a tensor the manifest points at."""
