"""Exact parameter and FLOPs accounting, and the per-unit cost weights.

FLOPs are counted as multiply-accumulates of the encoder layers for one
sequence of ``seq_len`` tokens (one MAC = one unit).  Embedding lookups,
softmax, GELU, layer norm and the output heads are not counted.  Per layer:

    seq*h*a*(2k + v)      key, query and value projections
    seq^2*a*(k + v)       attention scores and weighted sum of values
    seq*h*v*a             output projection
    2*seq*h*f             feed-forward
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .config import LAYER_DIMENSIONS


class CostContractError(ValueError):
    pass


@dataclass(frozen=True)
class CountFlags:
    """Which parameter groups :func:`count_params` includes (all by default)."""

    biases: bool = True
    layer_norms: bool = True
    heads: bool = True
    position_segment: bool = True

    @classmethod
    def weights_only(cls):
        return cls(False, False, False, False)

    @classmethod
    def from_dict(cls, d):
        return cls(**(d or {}))


@dataclass
class LayerCost:
    attention: int
    feed_forward: int

    @property
    def total(self):
        return self.attention + self.feed_forward


@dataclass
class CostBreakdown:
    word_embeddings: int
    position_embeddings: int
    segment_embeddings: int
    embedding_layer_norm: int
    layers: list
    pooler: int
    nsp: int
    mlm_bias: int
    flops: int | None = None

    @property
    def embeddings(self):
        return self.word_embeddings + self.position_embeddings + self.segment_embeddings + self.embedding_layer_norm

    @property
    def heads(self):
        return self.pooler + self.nsp + self.mlm_bias

    @property
    def total(self):
        return self.embeddings + sum(layer.total for layer in self.layers) + self.heads

    def to_dict(self):
        return {
            "word_embeddings": self.word_embeddings,
            "position_embeddings": self.position_embeddings,
            "segment_embeddings": self.segment_embeddings,
            "embedding_layer_norm": self.embedding_layer_norm,
            "layers": [{"attention": l.attention, "feed_forward": l.feed_forward} for l in self.layers],
            "pooler": self.pooler,
            "nsp": self.nsp,
            "mlm_bias": self.mlm_bias,
            "total": self.total,
            "flops": self.flops,
        }


# The closed forms below take raw integers so that marginal savings can be
# evaluated one unit below the current size without building a config.


def _layer_params(h, a, k, v, f, flags):
    attn = 2 * k * a * h + v * a * h + h * v * a
    ffn = f * h + h * f
    if flags.biases:
        attn += h
        ffn += f + h
    if flags.layer_norms:
        attn += 2 * h
        ffn += 2 * h
    return attn, ffn


def _total_params(h, vocab, positions, segments, a, k, v, f, flags):
    total = vocab * h
    if flags.position_segment:
        total += (positions + segments) * h
    if flags.layer_norms:
        total += 2 * h
    for i in range(len(a)):
        total += sum(_layer_params(h, a[i], k[i], v[i], f[i], flags))
    if flags.heads:
        total += h * h + 2 * h
        if flags.biases:
            total += h + 2 + vocab
    return total


def _layer_flops(seq, h, a, k, v, f):
    return seq * h * a * (2 * k + v) + seq * seq * a * (k + v) + seq * h * v * a + 2 * seq * h * f


def _total_flops(seq, h, a, k, v, f):
    return sum(_layer_flops(seq, h, a[i], k[i], v[i], f[i]) for i in range(len(a)))


def count_params(config, flags=None, seq_len=None):
    """Integer parameter breakdown; also fills ``flops`` when ``seq_len`` is given."""
    flags = flags or CountFlags()
    h, V = config.h, config.vocab_size
    layers = [
        LayerCost(*_layer_params(h, config.a[i], config.k[i], config.v[i], config.f[i], flags))
        for i in range(config.ell)
    ]
    pooler = nsp = mlm_bias = 0
    if flags.heads:
        pooler, nsp = h * h, 2 * h
        if flags.biases:
            pooler += h
            nsp += 2
            mlm_bias = V
    ps = flags.position_segment
    return CostBreakdown(
        word_embeddings=V * h,
        position_embeddings=config.max_positions * h if ps else 0,
        segment_embeddings=config.segment_types * h if ps else 0,
        embedding_layer_norm=2 * h if flags.layer_norms else 0,
        layers=layers,
        pooler=pooler,
        nsp=nsp,
        mlm_bias=mlm_bias,
        flops=None if seq_len is None else count_flops(config, seq_len),
    )


def count_flops(config, seq_len):
    if seq_len < 1:
        raise CostContractError(f"seq_len must be >= 1 (got {seq_len})")
    return _total_flops(seq_len, config.h, config.a, config.k, config.v, config.f)


class Objective:
    """Evaluates the pruning objective (params or FLOPs) on raw dimensions."""

    def __init__(self, config, objective="params", flags=None, seq_len=128):
        if objective not in ("params", "flops"):
            raise CostContractError(f"unknown objective {objective!r}")
        self.kind = objective
        self.flags = flags or CountFlags()
        self.seq_len = seq_len
        self.vocab = config.vocab_size
        self.positions = config.max_positions
        self.segments = config.segment_types

    def __call__(self, h, a, k, v, f):
        if self.kind == "params":
            return _total_params(h, self.vocab, self.positions, self.segments, a, k, v, f, self.flags)
        return _total_flops(self.seq_len, h, a, k, v, f)

    def of_config(self, config):
        return self(config.h, config.a, config.k, config.v, config.f)

    def unit_savings(self, dims, dim, layer=None):
        """Objective drop from removing one unit of ``dim`` given mutable ``dims``."""
        h, a, k, v, f = dims["h"], dims["a"], dims["k"], dims["v"], dims["f"]
        before = self(h, a, k, v, f)
        if dim == "h":
            return before - self(h - 1, a, k, v, f)
        reduced = {"a": a, "k": k, "v": v, "f": f}
        values = list(reduced[dim])
        values[layer] -= 1
        reduced[dim] = values
        return before - self(h, **reduced)


def marginal_savings(config, dimension, layer=None, objective="params", flags=None, seq_len=128):
    """Exact objective reduction from shrinking one dimension by a single unit."""
    if dimension not in ("h",) + LAYER_DIMENSIONS:
        raise CostContractError(f"unknown dimension {dimension!r}")
    if dimension != "h" and layer is None:
        raise CostContractError(f"dimension {dimension!r} needs a layer index")
    current = config.h if dimension == "h" else getattr(config, dimension)[layer]
    if current < 2:
        raise CostContractError(f"{dimension}[{layer}] is already at its lower bound of 1")
    obj = Objective(config, objective, flags, seq_len)
    return obj.unit_savings(_dims(config), dimension, layer)


def _dims(config):
    return {"h": config.h, "a": list(config.a), "k": list(config.k), "v": list(config.v), "f": list(config.f)}


@dataclass
class CostWeights:
    """Per-unit cost weights, raw and normalised so the largest is 1."""

    beta_h: float
    beta_a: list
    beta_k: list
    beta_v: list
    beta_f: list
    reference: int
    raw: dict = field(default_factory=dict)
    objective: str = "params"

    def per_dim(self, dim):
        return self.beta_h if dim == "h" else getattr(self, f"beta_{dim}")

    def summary(self):
        """Layer-averaged betas keyed by dimension, heads first."""

        def avg(x):
            return sum(x) / len(x)

        return {
            "a": avg(self.beta_a),
            "h": self.beta_h,
            "k": avg(self.beta_k),
            "v": avg(self.beta_v),
            "f": avg(self.beta_f),
        }

    def to_dict(self):
        return {
            "objective": self.objective,
            "reference": self.reference,
            "beta_h": self.beta_h,
            "beta_a": list(self.beta_a),
            "beta_k": list(self.beta_k),
            "beta_v": list(self.beta_v),
            "beta_f": list(self.beta_f),
            "raw": self.raw,
        }


def compute_betas(config, objective="params", flags=None, seq_len=128):
    """Cost weights from exact one-unit savings of each dimension.

    The hidden-size weight covers every tensor carrying ``h``: embedding
    rows, all layers, pooler and classifier.  Dimensions already at 1 still
    receive the savings they would have had, evaluated at size 1 -> 0.
    """
    obj = Objective(config, objective, flags, seq_len)
    dims = _dims(config)
    raw = {"h": obj.unit_savings(dims, "h")}
    for d in LAYER_DIMENSIONS:
        raw[d] = [obj.unit_savings(dims, d, i) for i in range(config.ell)]
    reference = max([raw["h"]] + [x for d in LAYER_DIMENSIONS for x in raw[d]])
    if reference <= 0:
        raise CostContractError("all marginal savings are zero")
    return CostWeights(
        beta_h=raw["h"] / reference,
        beta_a=[x / reference for x in raw["a"]],
        beta_k=[x / reference for x in raw["k"]],
        beta_v=[x / reference for x in raw["v"]],
        beta_f=[x / reference for x in raw["f"]],
        reference=int(reference),
        raw=raw,
        objective=objective,
    )
