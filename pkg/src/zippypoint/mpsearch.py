"""Per-block precision search over the network's macro-blocks.

The architecture splits into five macro-blocks: the first encoder
convolution, the remaining encoder convolutions, the spatial reduction
layers, the non-head decoder convolutions, and the heads. Instead of
scoring every combination of per-block candidates (a product), the
search walks the blocks upstream to downstream and settles each one in
turn: candidates for the current block are evaluated with earlier
decisions frozen and later blocks at their defaults. The cost is the sum
of the candidate counts.

Evaluators are pluggable. The shipped ones are a replay of the design
study that produced the default configuration, and a latency proxy that
benches real forwards with random weights.
"""

import json
import math
import time
from dataclasses import dataclass, field

from ._threads import run_chunks, thread_count
from .errors import ConfigurationError, InvalidInputError, SearchAborted
from .netgraph import (
    NetworkSpec,
    baseline_spec,
    build,
    build_stores,
    forward,
    random_master,
    synthetic_image,
)
from .netgraph.config import (
    CONV_PRECISIONS,
    FIRST_CONV_PRECISIONS,
    HEAD_PRECISIONS,
    POOLING_MODES,
)

# block id -> the NetworkSpec field it decides, and its legal labels
BLOCK_FIELDS = {
    "first_conv": FIRST_CONV_PRECISIONS,
    "encoder": CONV_PRECISIONS,
    "pooling": POOLING_MODES,
    "decoder": ("int8", "bin_r"),
    "descriptor_head": HEAD_PRECISIONS,
}
BLOCK_ORDER = ("first_conv", "encoder", "pooling", "decoder", "descriptor_head")


@dataclass(frozen=True)
class BlockSpace:
    block_id: str
    candidates: tuple

    def __post_init__(self):
        if self.block_id not in BLOCK_FIELDS:
            raise ConfigurationError(
                f"unknown block {self.block_id!r}, expected one of {BLOCK_ORDER}"
            )
        cands = tuple(self.candidates)
        if not cands:
            raise ConfigurationError(f"block {self.block_id!r} has no candidates")
        legal = BLOCK_FIELDS[self.block_id]
        for c in cands:
            if c not in legal:
                raise ConfigurationError(
                    f"label {c!r} is not valid for block {self.block_id!r} (legal: {legal})"
                )
        if len(set(cands)) != len(cands):
            raise ConfigurationError(f"block {self.block_id!r} repeats a candidate")
        object.__setattr__(self, "candidates", cands)


def default_spaces() -> tuple:
    """The candidate sets the shipped configuration was chosen from."""
    return (
        BlockSpace("first_conv", ("fp", "int8")),
        BlockSpace("encoder", ("int8", "bin", "bin_r")),
        BlockSpace("pooling", ("max", "average", "subsample", "learned", "early_learned")),
        BlockSpace("decoder", ("int8", "bin_r")),
        BlockSpace("descriptor_head", ("fp", "int8")),
    )


@dataclass(frozen=True)
class Evaluation:
    config: NetworkSpec
    score: float
    latency: float  # milliseconds, 0 when the evaluator does not measure
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise InvalidInputError(f"evaluation score must be finite, got {self.score}")
        if not (math.isfinite(self.latency) and self.latency >= 0):
            raise InvalidInputError(f"latency must be finite and >= 0, got {self.latency}")

    def as_dict(self) -> dict:
        return {
            "config": self.config.as_dict(),
            "score": self.score,
            "latency": self.latency,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d) -> "Evaluation":
        return cls(NetworkSpec.from_dict(d["config"]), d["score"], d["latency"],
                   dict(d.get("metadata", {})))


@dataclass(frozen=True)
class BlockDecision:
    block_id: str
    candidates: tuple  # label per evaluation, in evaluation order
    evaluations: tuple  # Evaluation per candidate
    chosen: str

    def as_dict(self) -> dict:
        return {
            "block_id": self.block_id,
            "candidates": list(self.candidates),
            "evaluations": [e.as_dict() for e in self.evaluations],
            "chosen": self.chosen,
        }

    @classmethod
    def from_dict(cls, d) -> "BlockDecision":
        return cls(
            d["block_id"],
            tuple(d["candidates"]),
            tuple(Evaluation.from_dict(e) for e in d["evaluations"]),
            d["chosen"],
        )


@dataclass(frozen=True)
class SearchTrace:
    blocks: tuple  # BlockDecision, in traversal order
    final: NetworkSpec

    @property
    def n_evaluations(self) -> int:
        return sum(len(b.evaluations) for b in self.blocks)

    def as_dict(self) -> dict:
        return {
            "blocks": [b.as_dict() for b in self.blocks],
            "final": self.final.as_dict(),
            "n_evaluations": self.n_evaluations,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text) -> "SearchTrace":
        d = json.loads(text)
        return cls(
            tuple(BlockDecision.from_dict(b) for b in d["blocks"]),
            NetworkSpec.from_dict(d["final"]),
        )


def lexicographic_selector(candidates, evaluations):
    """Highest score wins; ties fall to lower latency, then list order."""
    best = 0
    for i in range(1, len(evaluations)):
        a, b = evaluations[i], evaluations[best]
        if a.score > b.score or (a.score == b.score and a.latency < b.latency):
            best = i
    return candidates[best]


def traverse(spaces, evaluator, selector=lexicographic_selector, base=None,
             threads=1) -> SearchTrace:
    """Settle each block in order, candidates judged under frozen context.

    The context for block i is every earlier decision plus the base
    configuration (default: the full-precision baseline) for blocks not
    yet visited. An evaluator exception aborts the search; the raised
    SearchAborted carries the decisions made so far in partial_trace.
    """
    spaces = tuple(spaces)
    seen = set()
    for s in spaces:
        if not isinstance(s, BlockSpace):
            raise ConfigurationError(f"expected BlockSpace, got {type(s).__name__}")
        if s.block_id in seen:
            raise ConfigurationError(f"block {s.block_id!r} appears twice")
        seen.add(s.block_id)

    current = base or baseline_spec()
    decisions = []
    for space in spaces:
        cands = space.candidates
        evals = [None] * len(cands)

        def eval_span(lo, hi):
            for i in range(lo, hi):
                spec = current.with_(**{space.block_id: cands[i]})
                ev = evaluator(spec)
                if not isinstance(ev, Evaluation):
                    raise InvalidInputError(
                        f"evaluator returned {type(ev).__name__}, not Evaluation"
                    )
                evals[i] = ev

        try:
            run_chunks(eval_span, len(cands), 1, thread_count(threads))
        except Exception as e:
            partial = SearchTrace(tuple(decisions), current)
            raise SearchAborted(
                f"evaluator failed on block {space.block_id!r}: {e}", partial
            ) from e

        chosen = selector(cands, tuple(evals))
        if chosen not in cands:
            raise ConfigurationError(f"selector returned non-candidate {chosen!r}")
        current = current.with_(**{space.block_id: chosen})
        decisions.append(BlockDecision(space.block_id, cands, tuple(evals), chosen))
    return SearchTrace(tuple(decisions), current)


# Measurements from the design study behind the shipped configuration:
# per candidate, (repeatability, localization error, cor-1, cor-3, cor-5,
# matching score, frames/s) at 240x320 on an ARM laptop CPU, plus which
# label each block settled on. Kept as data so the search can replay the
# study without anyone retraining networks.
STUDY_FIELDS = ("repeatability", "localization_error", "cor1", "cor3", "cor5",
                "matching_score", "fps")
STUDY_ROWS = {
    ("first_conv", "fp"): (0.651, 0.840, 0.528, 0.867, 0.922, 0.574, 10.6),
    ("first_conv", "int8"): (0.657, 0.825, 0.548, 0.866, 0.925, 0.577, 13.8),
    ("encoder", "int8"): (0.657, 0.825, 0.548, 0.866, 0.925, 0.577, 13.8),
    ("encoder", "bin"): (0.561, 1.120, 0.281, 0.401, 0.449, 0.247, 15.2),
    ("encoder", "bin_r"): (0.653, 1.040, 0.401, 0.811, 0.890, 0.563, 14.5),
    ("pooling", "max"): (0.653, 1.040, 0.401, 0.811, 0.890, 0.563, 14.5),
    ("pooling", "average"): (0.656, 1.068, 0.354, 0.788, 0.873, 0.558, 13.9),
    ("pooling", "subsample"): (0.640, 1.128, 0.362, 0.783, 0.881, 0.537, 14.4),
    ("pooling", "learned"): (0.648, 0.890, 0.517, 0.848, 0.916, 0.571, 14.2),
    ("pooling", "early_learned"): (0.656, 0.943, 0.491, 0.844, 0.906, 0.568, 16.2),
    ("decoder", "int8"): (0.658, 0.964, 0.488, 0.840, 0.900, 0.569, 27.2),
    ("decoder", "bin_r"): (0.655, 1.018, 0.451, 0.456, 0.481, 0.329, 30.1),
    ("descriptor_head", "fp"): (0.658, 0.964, 0.488, 0.840, 0.900, 0.569, 27.2),
    ("descriptor_head", "int8"): (0.652, 0.926, 0.506, 0.853, 0.917, 0.571, 47.2),
}
STUDY_BASELINE_ROW = (0.649, 0.792, 0.566, 0.880, 0.925, 0.571, 3.6)
STUDY_SELECTION = NetworkSpec()  # the shipped defaults are the study's outcome


def replay_evaluator(spec: NetworkSpec) -> Evaluation:
    """Score a configuration by agreement with the recorded study outcome.

    The study adjudicated each block by eye, weighing functional metrics
    against throughput with no closed formula, so the honest replay is
    the decision record itself: the score counts searched axes on which
    `spec` matches the settled configuration. Within one block's
    candidate round every context axis is constant, so exactly the
    recorded choice scores one higher than its rivals and the traversal
    reproduces the study. The recorded measurement rows ride along in
    metadata for inspection.
    """
    score = 0.0
    rows = {}
    for block in BLOCK_ORDER:
        label = getattr(spec, block)
        if label == getattr(STUDY_SELECTION, block):
            score += 1.0
        if (block, label) in STUDY_ROWS:
            rows[block] = dict(zip(STUDY_FIELDS, STUDY_ROWS[(block, label)]))
    return Evaluation(config=spec, score=score, latency=0.0, metadata={"study_rows": rows})


def make_latency_evaluator(height=240, width=320, seed=0, reps=3):
    """Evaluator that benches a real forward pass with random weights.

    The score is a constant 0: random weights say nothing about
    functional quality, and pretending otherwise would be worse than
    useless. Only the latency field carries information, which makes
    this evaluator meaningful solely for throughput-ordering runs (the
    default selector then reduces to fastest-per-block).
    """
    image = synthetic_image(height, width, seed=seed)

    def evaluate(spec: NetworkSpec) -> Evaluation:
        graph = build(spec)
        master = random_master(graph, seed=seed)
        _, store = build_stores(graph, master, image)
        forward(graph, store, image)  # warm caches and jitted kernels
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            forward(graph, store, image)
            times.append(time.perf_counter() - t0)
        ms = sorted(times)[len(times) // 2] * 1e3
        return Evaluation(
            config=spec, score=0.0, latency=ms,
            metadata={"mode": "latency-proxy", "reps": reps,
                      "input": [height, width], "fps": 1e3 / ms},
        )

    return evaluate


def parse_space_config(text) -> tuple:
    """Block spaces from a text config, one block per line.

        # comment
        first_conv: fp int8
        encoder: int8 bin_r

    The optional word "block" may precede the id. Line order is the
    traversal order. Unknown ids, repeated blocks, unknown labels, and
    empty candidate lists are configuration errors.
    """
    spaces = []
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ConfigurationError(f"line {lineno}: expected '<block>: <labels>', got {raw!r}")
        head, tail = line.split(":", 1)
        block_id = head.strip()
        if block_id.startswith("block "):
            block_id = block_id[len("block "):].strip()
        if block_id in seen:
            raise ConfigurationError(f"line {lineno}: block {block_id!r} repeated")
        try:
            space = BlockSpace(block_id, tuple(tail.split()))
        except ConfigurationError as e:
            raise ConfigurationError(f"line {lineno}: {e}") from None
        seen.add(block_id)
        spaces.append(space)
    if not spaces:
        raise ConfigurationError("space config declares no blocks")
    return tuple(spaces)
