"""Generalised BERT encoder with per-layer head/key/value/filter sizes.

Weight layouts follow the per-layer tensor shapes used throughout the
package: ``K, Q: [k, a, h]``, ``V: [v, a, h]``, ``P: [h, v, a]``,
``D: [f, h]`` and ``G: [h, f]``.  The word-embedding matrix ``E`` is reused
(transposed) as the masked-LM decoder.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import autograd as ag
from .autograd import DimensionError, Tensor
from .config import ArchConfig

INIT_STD = 0.02


@dataclass
class LayerWeights:
    K: Tensor
    Q: Tensor
    V: Tensor
    P: Tensor
    P_bias: Tensor
    ln1_gain: Tensor
    ln1_shift: Tensor
    D: Tensor
    D_bias: Tensor
    G: Tensor
    G_bias: Tensor
    ln2_gain: Tensor
    ln2_shift: Tensor

    @property
    def dims(self):
        k, a, h = self.K.shape
        return {"h": h, "a": a, "k": k, "v": self.V.shape[0], "f": self.D.shape[0]}


@dataclass
class ModelWeights:
    config: ArchConfig
    E: Tensor
    pos: Tensor
    seg: Tensor
    emb_ln_gain: Tensor
    emb_ln_shift: Tensor
    layers: list
    pool_W: Tensor
    pool_b: Tensor
    nsp_W: Tensor
    nsp_b: Tensor
    mlm_bias: Tensor

    def named_tensors(self):
        """``(name, tensor)`` pairs in checkpoint order."""
        out = []
        for f in fields(self):
            if f.name in ("config", "layers"):
                continue
            out.append((f.name, getattr(self, f.name)))
            if f.name == "emb_ln_shift":
                for i, layer in enumerate(self.layers):
                    for lf in fields(layer):
                        out.append((f"layers.{i}.{lf.name}", getattr(layer, lf.name)))
        return out

    def parameters(self):
        return [t for _, t in self.named_tensors()]

    def set_trainable(self, flag):
        for t in self.parameters():
            t.requires_grad = flag
            t.grad = None
        return self

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def num_parameters(self):
        return int(sum(t.size for t in self.parameters()))

    def copy(self):
        return from_arrays(self.config, {n: t.data.copy() for n, t in self.named_tensors()})


def expected_shapes(config):
    """Tensor name -> shape for a config; the single source of layout truth."""
    h, V = config.h, config.vocab_size
    shapes = {
        "E": (V, h),
        "pos": (config.max_positions, h),
        "seg": (config.segment_types, h),
        "emb_ln_gain": (h,),
        "emb_ln_shift": (h,),
    }
    for i in range(config.ell):
        a, k, v, f = config.a[i], config.k[i], config.v[i], config.f[i]
        p = f"layers.{i}."
        shapes.update(
            {
                p + "K": (k, a, h),
                p + "Q": (k, a, h),
                p + "V": (v, a, h),
                p + "P": (h, v, a),
                p + "P_bias": (h,),
                p + "ln1_gain": (h,),
                p + "ln1_shift": (h,),
                p + "D": (f, h),
                p + "D_bias": (f,),
                p + "G": (h, f),
                p + "G_bias": (h,),
                p + "ln2_gain": (h,),
                p + "ln2_shift": (h,),
            }
        )
    shapes.update({"pool_W": (h, h), "pool_b": (h,), "nsp_W": (2, h), "nsp_b": (2,), "mlm_bias": (V,)})
    return shapes


def from_arrays(config, arrays, requires_grad=False):
    """Assemble :class:`ModelWeights` from a name -> array mapping."""
    shapes = expected_shapes(config)
    missing = set(shapes) - set(arrays)
    if missing:
        raise DimensionError(f"missing tensors: {sorted(missing)}")
    t = {}
    for name, shape in shapes.items():
        arr = arrays[name]
        if tuple(arr.shape) != shape:
            raise DimensionError(f"{name}: expected shape {shape}, got {tuple(arr.shape)}")
        t[name] = Tensor(arr, requires_grad=requires_grad)
    layer_names = [f.name for f in fields(LayerWeights)]
    layers = [
        LayerWeights(**{n: t[f"layers.{i}.{n}"] for n in layer_names}) for i in range(config.ell)
    ]
    top = {n: t[n] for n in shapes if not n.startswith("layers.")}
    return ModelWeights(config=config, layers=layers, **top)


# std of a unit normal truncated to [-2, 2]
_TRUNC_STD = 0.8796256610342398


def _truncated_normal(rng, shape, std=INIT_STD, bound=2.0):
    """Normal resampled outside +-2 and rescaled so the sample std is ``std``."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * (std / _TRUNC_STD)


def init_model(config, seed=0, requires_grad=True):
    """Truncated-normal (std 0.02) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in expected_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_gain"):
            arrays[name] = np.ones(shape)
        elif leaf.endswith(("_bias", "_b", "_shift")):
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = _truncated_normal(rng, shape)
    return from_arrays(config, arrays, requires_grad=requires_grad)


def _attention_mask(mask, batch, seq):
    if mask is None:
        return np.ones((batch, seq), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (batch, seq):
        raise DimensionError(f"attention mask shape {mask.shape} != {(batch, seq)}")
    return mask


def encoder_layer_forward(x, layer, attention_mask=None, eps=1e-12, h_mask=None, return_probs=False):
    """One encoder block on ``x`` of shape ``[seq, h]`` or ``[batch, seq, h]``.

    ``attention_mask`` marks real (True) versus padded keys; padded keys get
    zero attention.  Scores are scaled by ``1/sqrt(k)`` with the layer's own
    key size.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
        if attention_mask is not None:
            attention_mask = np.asarray(attention_mask)[None]
    B, S, h = x.shape
    d = layer.dims
    if h != d["h"]:
        raise DimensionError(f"input hidden size {h} != layer hidden size {d['h']}")
    a, k, v = d["a"], d["k"], d["v"]
    mask = _attention_mask(attention_mask, B, S)

    def heads(W, size):
        proj = x @ W.reshape(size * a, h).T  # [B, S, size*a]
        return proj.reshape(B, S, size, a).transpose(0, 3, 1, 2)  # [B, a, S, size]

    q = heads(layer.Q, k)
    kk = heads(layer.K, k)
    vv = heads(layer.V, v)
    scores = (q @ kk.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(k))
    probs = ag.softmax(scores, axis=-1, mask=mask[:, None, None, :])
    ctx = (probs @ vv).transpose(0, 2, 3, 1).reshape(B, S, v * a)  # [B, S, v*a]
    attn_out = ctx @ layer.P.reshape(h, v * a).T + layer.P_bias
    x1 = ag.layer_norm(x + attn_out, layer.ln1_gain, layer.ln1_shift, eps, h_mask)
    inner = ag.gelu(x1 @ layer.D.T + layer.D_bias)
    x2 = ag.layer_norm(x1 + (inner @ layer.G.T + layer.G_bias), layer.ln2_gain, layer.ln2_shift, eps, h_mask)
    if squeeze:
        x2 = x2.reshape(S, h)
        probs = probs.reshape(a, S, S)
    return (x2, probs) if return_probs else x2


def embed(weights, tokens, segments=None, positions=None, h_mask=None):
    cfg = weights.config
    tokens = np.asarray(tokens)
    B, S = tokens.shape
    if S > cfg.max_positions:
        raise IndexError(f"sequence length {S} exceeds max_positions={cfg.max_positions}")
    segments = np.zeros_like(tokens) if segments is None else np.asarray(segments)
    positions = np.broadcast_to(np.arange(S), (B, S)) if positions is None else np.asarray(positions)
    x = (
        ag.embedding(weights.E, tokens)
        + ag.embedding(weights.pos, positions)
        + ag.embedding(weights.seg, segments)
    )
    return ag.layer_norm(x, weights.emb_ln_gain, weights.emb_ln_shift, cfg.layer_norm_eps, h_mask)


def model_forward(weights, tokens, segments=None, positions=None, mask=None, h_mask=None):
    """Run the encoder; returns ``(sequence_output, cls_vector)``.

    Accepts one sequence (1-D ids, giving ``[seq, h]`` and ``[h]``) or a
    padded batch (2-D ids).  ``cls_vector`` is position 0 passed through the
    tanh pooler.
    """
    tokens = np.asarray(tokens)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None]
        segments = None if segments is None else np.asarray(segments)[None]
        positions = None if positions is None else np.asarray(positions)[None]
        mask = None if mask is None else np.asarray(mask)[None]
    x = embed(weights, tokens, segments, positions, h_mask)
    mask = _attention_mask(mask, *tokens.shape)
    for layer in weights.layers:
        x = encoder_layer_forward(x, layer, mask, weights.config.layer_norm_eps, h_mask)
    cls = ag.tanh(x[:, 0, :] @ weights.pool_W.T + weights.pool_b)
    if single:
        return x[0], cls[0]
    return x, cls


def mlm_logits(weights, sequence_output, rows, cols):
    """Decode hidden states at ``(rows, cols)`` through the tied embedding."""
    B, S, _ = sequence_output.shape
    rows, cols = np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64)
    if rows.size and (cols.min() < 0 or cols.max() >= S or rows.min() < 0 or rows.max() >= B):
        raise IndexError(f"masked position outside the [{B}, {S}] batch")
    picked = sequence_output[rows, cols]
    return picked @ weights.E.T + weights.mlm_bias


def mlm_nsp_loss(weights, batch, h_mask=None):
    """Masked-LM plus next-sentence loss; returns ``(total, mlm, nsp)``."""
    seq, cls = model_forward(weights, batch.tokens, batch.segments, None, batch.attention_mask, h_mask)
    logits = mlm_logits(weights, seq, batch.mlm_rows, batch.mlm_cols)
    mlm = ag.cross_entropy(logits, batch.mlm_targets)
    nsp_logits = cls @ weights.nsp_W.T + weights.nsp_b
    nsp = ag.cross_entropy(nsp_logits, batch.is_next)
    return mlm + nsp, mlm, nsp
