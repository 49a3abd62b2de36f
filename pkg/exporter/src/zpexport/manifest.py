"""Manifest schema: what to export and under which quantization grids.

A manifest is JSON with five parts:

    tool     "zpexport" (informational)
    version  schema version, currently 1
    network  the engine NetworkSpec as a dict
    image    fixture image reference: a file path or a bundled data name
    layers   engine layer name -> {"conv": prefix, "bn": prefix?, "proj": prefix?}
    grids    engine layer name -> {"in"/"pre"/"act": [scale, zero_point]}

Checkpoint prefixes name tensor families: "<prefix>.weight" and
".bias" for convolutions, plus ".running_mean"/".running_var" for batch
norm. Which grid fields a layer must carry follows from the plan module;
validation is strict in both directions (nothing missing, nothing
extra), because a silently ignored grid is exactly the sort of thing
that later costs a day of debugging a one-step activation mismatch.
"""

import json
from dataclasses import dataclass, field

from zippypoint.netgraph import NetworkSpec, build

from .errors import ManifestError, UnmappedLayerError
from .plan import build_plan, section_of

TOOL = "zpexport"
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class LayerMap:
    conv: str
    bn: str | None = None
    proj: str | None = None


@dataclass
class ExportManifest:
    network: NetworkSpec
    layers: dict
    grids: dict
    image: str = "calib64.ppm"
    version: int = SCHEMA_VERSION
    tool: str = TOOL

    def as_dict(self) -> dict:
        d = {
            "tool": self.tool,
            "version": self.version,
            "network": self.network.as_dict(),
            "image": self.image,
            "layers": {},
            "grids": {},
        }
        for name, m in self.layers.items():
            entry = {"conv": m.conv}
            if m.bn is not None:
                entry["bn"] = m.bn
            if m.proj is not None:
                entry["proj"] = m.proj
            d["layers"][name] = entry
        for name, grids in self.grids.items():
            d["grids"][name] = {k: [s, zp] for k, (s, zp) in grids.items()}
        return d


def _parse_grid(layer: str, field_name: str, value):
    if (
        not isinstance(value, (list, tuple))
        or len(value) != 2
        or not isinstance(value[1], int)
    ):
        raise ManifestError(f"grid {layer}.{field_name} must be [scale, zero_point]")
    scale = float(value[0])
    zp = int(value[1])
    if not scale > 0.0:
        raise ManifestError(f"grid {layer}.{field_name}: scale must be positive, got {scale}")
    if not -128 <= zp <= 127:
        raise ManifestError(f"grid {layer}.{field_name}: zero_point {zp} does not fit int8")
    return scale, zp


def parse_manifest(d: dict) -> ExportManifest:
    if not isinstance(d, dict):
        raise ManifestError("manifest must be a JSON object")
    version = d.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ManifestError(f"manifest version {version}, this tool reads {SCHEMA_VERSION}")
    for key in ("network", "layers", "grids"):
        if key not in d:
            raise ManifestError(f"manifest is missing {key!r}")
    try:
        network = NetworkSpec.from_dict(d["network"])
    except Exception as e:
        raise ManifestError(f"bad network section: {e}") from None

    layers = {}
    for name, entry in d["layers"].items():
        if not isinstance(entry, dict) or "conv" not in entry:
            raise ManifestError(f"layer {name!r}: mapping needs a 'conv' prefix")
        extra = set(entry) - {"conv", "bn", "proj"}
        if extra:
            raise ManifestError(f"layer {name!r}: unknown mapping keys {sorted(extra)}")
        layers[name] = LayerMap(entry["conv"], entry.get("bn"), entry.get("proj"))

    grids = {}
    for name, entry in d["grids"].items():
        if not isinstance(entry, dict):
            raise ManifestError(f"grids for {name!r} must be an object")
        grids[name] = {f: _parse_grid(name, f, v) for f, v in entry.items()}

    return ExportManifest(
        network=network,
        layers=layers,
        grids=grids,
        image=d.get("image", "calib64.ppm"),
        version=version,
        tool=d.get("tool", TOOL),
    )


def load_manifest(path) -> ExportManifest:
    with open(path, "r", encoding="utf-8") as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}: not valid JSON ({e})") from None
    return parse_manifest(d)


def save_manifest(manifest: ExportManifest, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest.as_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def validate(manifest: ExportManifest):
    """Check the manifest against its own network. Returns (graph, plans).

    Every layer that carries weights must be mapped exactly once and
    every required grid present; unknown layer names, stray grids, and
    projection mappings on layers that take none are all rejected.
    """
    graph = build(manifest.network)
    plans = build_plan(graph)
    by_name = {p.name: p for p in plans}

    unknown = sorted(set(manifest.layers) - set(by_name))
    if unknown:
        raise ManifestError(f"manifest maps unknown layers: {', '.join(unknown)}")
    unknown = sorted(set(manifest.grids) - set(by_name))
    if unknown:
        raise ManifestError(f"manifest has grids for unknown layers: {', '.join(unknown)}")

    missing = {}
    for p in plans:
        if p.needs_weights and p.name not in manifest.layers:
            missing.setdefault(section_of(graph, p.name), []).append(p.name)
    if missing:
        raise UnmappedLayerError(missing)

    for p in plans:
        if not p.needs_weights:
            if p.name in manifest.layers:
                raise ManifestError(f"layer {p.name!r} takes no weights but is mapped")
            continue
        m = manifest.layers[p.name]
        if p.needs_proj and m.proj is None:
            raise ManifestError(
                f"layer {p.name!r} changes channel count and needs a 'proj' mapping"
            )
        if not p.needs_proj and m.proj is not None:
            raise ManifestError(f"layer {p.name!r} takes no residual projection")

        want = p.grid_fields()
        have = manifest.grids.get(p.name, {})
        for f in want:
            if f not in have:
                raise ManifestError(f"layer {p.name!r} is missing its {f!r} grid")
        for f in have:
            if f not in want:
                raise ManifestError(f"layer {p.name!r} has a stray {f!r} grid")
    for name in manifest.grids:
        if not by_name[name].needs_weights and manifest.grids[name]:
            raise ManifestError(f"layer {name!r} takes no grids")

    return graph, plans
