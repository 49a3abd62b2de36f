"""Which records and quantization grids each layer needs.

The engine stores per-layer records whose presence depends on three
things: the layer's precision, whether an activation follows, and
whether the tensor arriving at the layer is float (which makes the
layer responsible for quantizing its input, recorded as an `.in` grid).
The last one falls out of a walk over the graph in execution order,
tracking the carrier type the same way the engine does: the image
enters quantized, quantized layers emit quantized tensors, fp layers
emit float, and plain pooling passes the carrier through.
"""

from dataclasses import dataclass


@dataclass(frozen=True)
class LayerPlan:
    layer: object  # engine LayerDef
    needs_in: bool

    @property
    def name(self) -> str:
        return self.layer.name

    @property
    def quantized(self) -> bool:
        l = self.layer
        if l.kind == "pool":
            return l.pool_mode == "learned"
        return l.precision != "fp"

    @property
    def needs_weights(self) -> bool:
        return self.layer.kind != "pool" or self.layer.pool_mode == "learned"

    @property
    def needs_act(self) -> bool:
        return self.layer.kind == "conv" and self.layer.activation and self.quantized

    @property
    def needs_proj(self) -> bool:
        l = self.layer
        return (
            l.kind == "conv"
            and l.precision == "bin_r"
            and l.in_channels != l.out_channels
        )

    def grid_fields(self):
        fields = []
        if self.needs_in:
            fields.append("in")
        if self.quantized:
            fields.append("pre")
        if self.needs_act:
            fields.append("act")
        return fields


def _walk(layers, carrier_quantized, out):
    for l in layers:
        if l.kind == "pool":
            if l.pool_mode == "learned":
                out.append(LayerPlan(l, needs_in=not carrier_quantized))
                carrier_quantized = True
            else:
                out.append(LayerPlan(l, needs_in=False))
            continue
        if l.precision == "fp":
            out.append(LayerPlan(l, needs_in=False))
            carrier_quantized = False
        else:
            out.append(LayerPlan(l, needs_in=not carrier_quantized))
            carrier_quantized = True
    return carrier_quantized


def build_plan(graph) -> list:
    """LayerPlan per layer, encoder first, then each branch in turn."""
    plans = []
    state = _walk(graph.encoder, True, plans)
    for branch in (graph.score, graph.location, graph.descriptor):
        _walk(branch, state, plans)
    return plans


def section_of(graph, name: str) -> str:
    for section, layers in (
        ("encoder", graph.encoder),
        ("score", graph.score),
        ("location", graph.location),
        ("descriptor", graph.descriptor),
    ):
        if any(l.name == name for l in layers):
            return section
    raise KeyError(name)
