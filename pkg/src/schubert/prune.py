"""Structured pruning by learned per-unit scale vectors.

Every design dimension gets a vector of multipliers (``alpha``) that scales
each tensor slice tied to one unit of that dimension.  The multipliers are
trained under a cost-weighted L1 penalty with the base weights frozen, the
smallest ones are truncated to zero until the requested objective reduction
is met, surviving multipliers are folded into the weights, zeroed slices are
deleted, and the smaller model is fine-tuned.  :func:`run_schedule` repeats
this for a number of rounds.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Adam, ContractError, DimensionError, Tensor, no_grad
from .config import DIMENSIONS, LAYER_DIMENSIONS, ArchConfig, PruneConfig
from .cost import CountFlags, Objective, compute_betas, count_flops, count_params
from .data import collate, make_examples
from .model import ModelWeights, from_arrays, mlm_nsp_loss
from .training import evaluate, train


class InfeasibleTargetError(ValueError):
    def __init__(self, target, max_achievable):
        super().__init__(
            f"reduction target {target} is unreachable; at most {max_achievable} can be removed "
            "without emptying a dimension"
        )
        self.target = target
        self.max_achievable = max_achievable


class PruneInvariantError(RuntimeError):
    pass


def _size(config, dim, layer):
    return config.h if dim == "h" else getattr(config, dim)[layer]


@dataclass
class PruneState:
    """Scale vectors and keep-masks for ``h`` and every layer's ``a``, ``k``, ``v``, ``f``.

    ``alpha["h"]`` is one array; the layer dimensions map to lists of
    arrays.  ``keep`` mirrors that layout with booleans; a dropped entry's
    alpha is held at exactly zero.
    """

    alpha: dict
    keep: dict
    cost: object = None

    @classmethod
    def ones(cls, config, cost=None, dtype=None):
        dtype = dtype or ag.get_default_dtype()
        alpha = {"h": np.ones(config.h, dtype=dtype)}
        keep = {"h": np.ones(config.h, dtype=bool)}
        for d in LAYER_DIMENSIONS:
            alpha[d] = [np.ones(n, dtype=dtype) for n in getattr(config, d)]
            keep[d] = [np.ones(n, dtype=bool) for n in getattr(config, d)]
        return cls(alpha, keep, cost)

    def vectors(self):
        """Yield ``(dim, layer, alpha, keep)``; ``layer`` is None for ``h``."""
        yield "h", None, self.alpha["h"], self.keep["h"]
        for d in LAYER_DIMENSIONS:
            for i, (a, k) in enumerate(zip(self.alpha[d], self.keep[d])):
                yield d, i, a, k

    def get(self, dim, layer=None):
        if dim == "h":
            return self.alpha["h"], self.keep["h"]
        return self.alpha[dim][layer], self.keep[dim][layer]

    def drop(self, dim, layer, index):
        alpha, keep = self.get(dim, layer)
        if keep.sum() <= 1 and keep[index]:
            raise PruneInvariantError(f"cannot drop the last unit of {dim}[{layer}]")
        keep[index] = False
        alpha[index] = 0.0

    def surviving(self):
        out = {"h": int(self.keep["h"].sum())}
        for d in LAYER_DIMENSIONS:
            out[d] = [int(k.sum()) for k in self.keep[d]]
        return out

    def n_entries(self):
        return sum(a.size for _, _, a, _ in self.vectors())

    def check_against(self, config):
        for dim, layer, alpha, keep in self.vectors():
            if layer is not None and layer >= config.ell:
                raise DimensionError(f"state has more layers than config (ell={config.ell})")
            n = _size(config, dim, layer)
            if alpha.shape != (n,) or keep.shape != (n,):
                raise DimensionError(f"alpha_{dim}[{layer}] has length {alpha.shape[0]}, weights have {n}")
        if len(self.alpha["a"]) != config.ell:
            raise DimensionError(f"state has {len(self.alpha['a'])} layers, config has {config.ell}")


# -- attachment ----------------------------------------------------------------------------
def _col(t, axis, ndim):
    shape = [1] * ndim
    shape[axis] = -1
    return t.reshape(*shape)


class PrunableModel:
    """Base weights (frozen) seen through trainable scale vectors.

    :meth:`effective_weights` builds the scaled tensors as graph nodes, so it
    must be called once per forward/backward pass.
    """

    def __init__(self, weights, state, freeze=True):
        state.check_against(weights.config)
        self.weights = weights
        self.state = state
        if freeze:
            weights.set_trainable(False)
        self.alphas = {
            (dim, layer): Tensor(alpha, requires_grad=True) for dim, layer, alpha, _ in state.vectors()
        }

    @property
    def config(self):
        return self.weights.config

    def alpha_tensors(self):
        return list(self.alphas.values())

    def alpha(self, dim, layer=None):
        return self.alphas[(dim, layer)]

    @property
    def h_mask(self):
        keep = self.state.keep["h"]
        return None if keep.all() else keep

    def commit(self):
        """Copy optimiser updates back into the state, re-zeroing dropped entries."""
        for (dim, layer), t in self.alphas.items():
            alpha, keep = self.state.get(dim, layer)
            alpha[...] = np.where(keep, t.data, 0.0)
            t.data = alpha

    def effective_weights(self):
        w = self.weights
        ah = self.alpha("h")
        layers = []
        for i, L in enumerate(w.layers):
            aa, ak, av, af = (self.alpha(d, i) for d in LAYER_DIMENSIONS)
            kah = _col(ak, 0, 3) * _col(aa, 1, 3) * _col(ah, 2, 3)
            vah = _col(av, 0, 3) * _col(aa, 1, 3) * _col(ah, 2, 3)
            hva = _col(ah, 0, 3) * _col(av, 1, 3) * _col(aa, 2, 3)
            layers.append(
                type(L)(
                    K=L.K * kah,
                    Q=L.Q * kah,
                    V=L.V * vah,
                    P=L.P * hva,
                    P_bias=L.P_bias,
                    ln1_gain=L.ln1_gain,
                    ln1_shift=L.ln1_shift,
                    D=L.D * (_col(af, 0, 2) * _col(ah, 1, 2)),
                    D_bias=L.D_bias,
                    G=L.G * (_col(ah, 0, 2) * _col(af, 1, 2)),
                    G_bias=L.G_bias,
                    ln2_gain=L.ln2_gain,
                    ln2_shift=L.ln2_shift,
                )
            )
        row_h = _col(ah, 1, 2)
        return ModelWeights(
            config=w.config,
            E=w.E * row_h,
            pos=w.pos * row_h,
            seg=w.seg * row_h,
            emb_ln_gain=w.emb_ln_gain,
            emb_ln_shift=w.emb_ln_shift,
            layers=layers,
            pool_W=w.pool_W * row_h,
            pool_b=w.pool_b,
            nsp_W=w.nsp_W * row_h,
            nsp_b=w.nsp_b,
            mlm_bias=w.mlm_bias,
        )

    def loss(self, batch):
        return mlm_nsp_loss(self.effective_weights(), batch, self.h_mask)


def attach_prune_params(weights, state, freeze=True):
    return PrunableModel(weights, state, freeze)


def l1_penalty(ctx, cost):
    """Cost-weighted L1 norm of all scale vectors as a graph node."""
    total = None
    for (dim, layer), t in ctx.alphas.items():
        beta = cost.beta_h if dim == "h" else cost.per_dim(dim)[layer]
        term = ag.tabs(t).sum() * beta
        total = term if total is None else total + term
    return total


def regularized_loss(ctx, batch, gamma, cost, return_parts=False):
    """Data loss through the scaled weights plus ``gamma`` times the weighted L1 penalty."""
    if gamma < 0:
        raise ContractError(f"gamma must be >= 0 (got {gamma})")
    total, mlm, nsp = ctx.loss(batch)
    penalty = l1_penalty(ctx, cost)
    out = total + penalty * gamma if gamma > 0 else total
    if return_parts:
        return out, {"data": total, "mlm": mlm, "nsp": nsp, "penalty": penalty}
    return out


def soft_threshold(x, threshold):
    return np.sign(x) * np.maximum(np.abs(x) - threshold, 0.0)


def prox_step(state, grads, gamma, lr, cost=None):
    """Gradient step on the data term then soft-thresholding by ``lr*gamma*beta``.

    ``grads`` maps ``(dim, layer)`` to data-loss gradients (missing or None
    means zero).  Updates ``state`` in place and returns it.
    """
    cost = cost or state.cost
    for dim, layer, alpha, keep in state.vectors():
        g = grads.get((dim, layer))
        beta = cost.beta_h if dim == "h" else cost.per_dim(dim)[layer]
        step = alpha if g is None else alpha - lr * g
        alpha[...] = np.where(keep, soft_threshold(step, lr * gamma * beta), 0.0)
    return state


# -- truncation ------------------------------------------------------------------------------
_DIM_ORDER = {d: n for n, d in enumerate(DIMENSIONS)}


def _current_dims(state):
    s = state.surviving()
    return {"h": s["h"], "a": list(s["a"]), "k": list(s["k"]), "v": list(s["v"]), "f": list(s["f"])}


def select_truncation(state, config, objective="params", reduction_target=0, flags=None, seq_len=128):
    """Pick the entries to zero, smallest ``|alpha|`` first.

    Savings of each pick are evaluated at the dimensions left after the
    previous picks.  A vector's last surviving entry is never taken.
    Returns ``[(dim, layer, index), ...]`` in pick order.
    """
    if reduction_target <= 0:
        return []
    obj = Objective(config, objective, flags, seq_len)
    entries = []
    for dim, layer, alpha, keep in state.vectors():
        li = -1 if layer is None else layer
        for idx in np.flatnonzero(keep):
            entries.append((abs(float(alpha[idx])), _DIM_ORDER[dim], li, int(idx), dim, layer))
    entries.sort(key=lambda e: e[:4])
    dims = _current_dims(state)
    alive = {(dim, layer): int(keep.sum()) for dim, layer, _, keep in state.vectors()}
    picked, gained = [], 0
    for *_, idx, dim, layer in entries:
        if alive[(dim, layer)] <= 1:
            continue
        gained += obj.unit_savings(dims, dim, layer)
        if dim == "h":
            dims["h"] -= 1
        else:
            dims[dim][layer] -= 1
        alive[(dim, layer)] -= 1
        picked.append((dim, layer, idx))
        if gained >= reduction_target:
            return picked
    raise InfeasibleTargetError(reduction_target, gained)


def apply_truncation(state, picks):
    for dim, layer, idx in picks:
        state.drop(dim, layer, idx)
    return state


# -- fold and extract ------------------------------------------------------------------------
def fold_and_extract(weights, state):
    """Multiply the scale vectors into the weights and delete dropped slices.

    Returns ``(weights, config)`` for a dense model of the surviving sizes
    whose outputs match the masked prunable model.  The key/query size
    change is compensated by rescaling ``Q``.
    """
    state.check_against(weights.config)
    for dim, layer, alpha, keep in state.vectors():
        if not keep.any():
            raise PruneInvariantError(f"{dim}[{layer}] has no surviving unit")
        if np.any(alpha[~keep] != 0):
            raise PruneInvariantError(f"{dim}[{layer}] has dropped entries with non-zero alpha")
    with no_grad():
        eff = PrunableModel(weights, state, freeze=False).effective_weights()
    cfg = weights.config
    kh = np.flatnonzero(state.keep["h"])
    arrays = {
        "E": eff.E.data[:, kh],
        "pos": eff.pos.data[:, kh],
        "seg": eff.seg.data[:, kh],
        "emb_ln_gain": eff.emb_ln_gain.data[kh],
        "emb_ln_shift": eff.emb_ln_shift.data[kh],
        "pool_W": eff.pool_W.data[np.ix_(kh, kh)],
        "pool_b": eff.pool_b.data[kh],
        "nsp_W": eff.nsp_W.data[:, kh],
        "nsp_b": eff.nsp_b.data.copy(),
        "mlm_bias": eff.mlm_bias.data.copy(),
    }
    new = {"a": [], "k": [], "v": [], "f": []}
    for i, L in enumerate(eff.layers):
        ka, kk, kv, kf = (np.flatnonzero(state.keep[d][i]) for d in LAYER_DIMENSIONS)
        for d, idx in zip(LAYER_DIMENSIONS, (ka, kk, kv, kf)):
            new[d].append(len(idx))
        p = f"layers.{i}."
        arrays[p + "K"] = L.K.data[np.ix_(kk, ka, kh)]
        # keep q.k / sqrt(k) unchanged after the key size shrinks
        arrays[p + "Q"] = L.Q.data[np.ix_(kk, ka, kh)] * math.sqrt(len(kk) / cfg.k[i])
        arrays[p + "V"] = L.V.data[np.ix_(kv, ka, kh)]
        arrays[p + "P"] = L.P.data[np.ix_(kh, kv, ka)]
        arrays[p + "P_bias"] = L.P_bias.data[kh]
        arrays[p + "ln1_gain"] = L.ln1_gain.data[kh]
        arrays[p + "ln1_shift"] = L.ln1_shift.data[kh]
        arrays[p + "D"] = L.D.data[np.ix_(kf, kh)]
        arrays[p + "D_bias"] = L.D_bias.data[kf]
        arrays[p + "G"] = L.G.data[np.ix_(kh, kf)]
        arrays[p + "G_bias"] = L.G_bias.data[kh]
        arrays[p + "ln2_gain"] = L.ln2_gain.data[kh]
        arrays[p + "ln2_shift"] = L.ln2_shift.data[kh]
    new_cfg = ArchConfig(
        ell=cfg.ell,
        h=len(kh),
        a=new["a"],
        k=new["k"],
        v=new["v"],
        f=new["f"],
        vocab_size=cfg.vocab_size,
        max_positions=cfg.max_positions,
        segment_types=cfg.segment_types,
        layer_norm_eps=cfg.layer_norm_eps,
    )
    arrays = {n: np.ascontiguousarray(a) for n, a in arrays.items()}
    return from_arrays(new_cfg, arrays, requires_grad=True), new_cfg


# -- schedule --------------------------------------------------------------------------------
@dataclass
class PruneRoundRecord:
    round: int
    zeroed: dict
    params_before: int
    params_after: int
    flops_before: int
    flops_after: int
    objective_before: int
    objective_after: int
    target_objective: float
    mlm_before_finetune: float
    mlm_after_finetune: float
    regularize_loss: list
    config: dict
    optimizer_restarted: bool = True

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line):
        return cls(**json.loads(line))


def _zeroed_by_dim(picks):
    out = {d: [] for d in DIMENSIONS}
    for dim, layer, idx in sorted(picks, key=lambda p: (_DIM_ORDER[p[0]], -1 if p[1] is None else p[1], p[2])):
        out[dim].append(idx if dim == "h" else [layer, idx])
    return out


def _optimize_alphas(ctx, batches, pcfg, cost):
    history = []
    if pcfg.penalty == "l1":
        opt = Adam(ctx.alpha_tensors(), lr=pcfg.alpha_lr)
        for _ in range(pcfg.regularize_steps):
            loss, parts = regularized_loss(ctx, next(batches), pcfg.gamma, cost, return_parts=True)
            opt.zero_grad()
            loss.backward()
            opt.step()
            ctx.commit()
            history.append(loss.item())
    else:
        for _ in range(pcfg.regularize_steps):
            data, _, _ = ctx.loss(next(batches))
            for t in ctx.alpha_tensors():
                t.grad = None
            data.backward()
            grads = {key: t.grad for key, t in ctx.alphas.items()}
            penalty = sum(
                (cost.beta_h if d == "h" else cost.per_dim(d)[i]) * float(np.abs(a).sum())
                for d, i, a, _ in ctx.state.vectors()
            )
            history.append(data.item() + pcfg.gamma * penalty)
            prox_step(ctx.state, grads, pcfg.gamma, pcfg.alpha_lr, cost)
            for key, t in ctx.alphas.items():
                t.data = ctx.state.get(*key)[0]
    return history


def run_schedule(weights, pcfg, corpus, vocab, eval_corpus=None, log=None):
    """Prune ``weights`` by ``pcfg.eta`` of the objective over ``pcfg.rounds`` rounds.

    Each round re-initialises the scale vectors to one, trains them on the
    penalised loss, truncates to the cumulative target
    ``(1 - r*eta/T) * original``, extracts the smaller model and fine-tunes
    it with a fresh optimizer.  Returns ``(weights, records)``.
    """
    if not isinstance(pcfg, PruneConfig):
        pcfg = PruneConfig.from_dict(pcfg)
    flags = CountFlags.from_dict(pcfg.count_flags)
    config = weights.config
    max_pos = config.max_positions
    train_stream = make_examples(corpus, vocab, [pcfg.seed, 1], max_positions=max_pos)
    batches = _chunk(train_stream, pcfg.batch_size)
    eval_examples = list(
        make_examples(eval_corpus or corpus, vocab, [pcfg.seed, 2], max_positions=max_pos, n_examples=pcfg.eval_examples)
    )
    eval_batches = [
        collate(eval_examples[i : i + pcfg.batch_size]) for i in range(0, len(eval_examples), pcfg.batch_size)
    ]
    original = Objective(config, pcfg.objective, flags, pcfg.flops_seq_len).of_config(config)
    records = []
    for r in range(1, pcfg.rounds + 1):
        obj = Objective(config, pcfg.objective, flags, pcfg.flops_seq_len)
        cost = compute_betas(config, pcfg.objective, flags, pcfg.flops_seq_len)
        state = PruneState.ones(config, cost)
        ctx = attach_prune_params(weights, state)
        reg_history = _optimize_alphas(ctx, batches, pcfg, cost)
        before = obj.of_config(config)
        target = (1.0 - r * pcfg.eta / pcfg.rounds) * original
        picks = select_truncation(state, config, pcfg.objective, before - target, flags, pcfg.flops_seq_len)
        apply_truncation(state, picks)
        new_weights, new_config = fold_and_extract(weights, state)
        mlm_pre, _ = evaluate(new_weights, eval_batches)
        train(new_weights, batches, pcfg.finetune_steps, lr=pcfg.finetune_lr)
        mlm_post, _ = evaluate(new_weights, eval_batches)
        record = PruneRoundRecord(
            round=r,
            zeroed=_zeroed_by_dim(picks),
            params_before=count_params(config, flags).total,
            params_after=count_params(new_config, flags).total,
            flops_before=count_flops(config, pcfg.flops_seq_len),
            flops_after=count_flops(new_config, pcfg.flops_seq_len),
            objective_before=int(before),
            objective_after=int(obj.of_config(new_config)),
            target_objective=float(target),
            mlm_before_finetune=float(mlm_pre),
            mlm_after_finetune=float(mlm_post),
            regularize_loss=[float(x) for x in reg_history],
            config=new_config.to_dict(),
        )
        records.append(record)
        if log is not None:
            log(record)
        weights, config = new_weights, new_config
    return weights, records


def _chunk(stream, size):
    while True:
        yield collate([next(stream) for _ in range(size)])


def coarsest_unit(config, objective="params", flags=None, seq_len=128):
    """Largest one-unit saving among all prunable entries of ``config``."""
    cost = compute_betas(config, objective, flags, seq_len)
    return max([cost.raw["h"]] + [x for d in LAYER_DIMENSIONS for x in cost.raw[d]])
