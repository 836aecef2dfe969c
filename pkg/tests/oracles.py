"""Independent reference implementations shared by the test suites."""
import itertools

import numpy as np

from schubert import autograd as ag
from schubert.autograd import Tensor
from schubert.config import ArchConfig
from schubert.cost import CountFlags, Objective
from schubert.model import encoder_layer_forward, init_model, mlm_logits, model_forward
from schubert.prune import PruneState

DIMS = ("h", "a", "k", "v", "f")
WEIGHTS_ONLY = CountFlags.weights_only()


def outputs(weights, batch, h_mask=None):
    """Sequence output, MLM logits and NSP logits for a batch."""
    seq, cls = model_forward(weights, batch.tokens, batch.segments, None, batch.attention_mask, h_mask)
    logits = mlm_logits(weights, seq, batch.mlm_rows, batch.mlm_cols)
    nsp = cls @ weights.nsp_W.T + weights.nsp_b
    return seq.data, logits.data, nsp.data


def rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30))


def instrumented_macs(cfg, seq, seed):
    w = init_model(cfg, seed=seed, requires_grad=False)
    x = Tensor(np.random.default_rng(seed).normal(size=(seq, cfg.h)))
    with ag.count_macs() as counter:
        for layer in w.layers:
            x = encoder_layer_forward(x, layer)
    return counter.total


def random_state(config, rng, p_drop=0.3, cost=None):
    """Random signed alphas with a random drop pattern; every vector keeps one entry."""
    state = PruneState.ones(config, cost)
    for dim, layer, alpha, keep in state.vectors():
        alpha[...] = rng.uniform(0.3, 1.5, alpha.size) * rng.choice([-1, 1], alpha.size)
        drop = rng.random(alpha.size) < p_drop
        drop[rng.integers(alpha.size)] = False
        keep[drop] = False
        alpha[drop] = 0.0
    return state


def brute_force_truncation(state, config, objective, target, flags, seq_len):
    """Exhaustive oracle over every subset of surviving entries.

    Among subsets that keep one entry per vector and reach the target, find
    the smallest rank ``r`` (position in |alpha| order) such that some subset
    uses only entries of rank <= r.  The answer is the largest such subset:
    every entry of rank <= r except the highest-ranked entry of any vector
    that would otherwise be emptied.
    """
    obj = Objective(config, objective, flags, seq_len)
    entries = []
    order = {d: n for n, d in enumerate(DIMS)}
    for dim, layer, alpha, keep in state.vectors():
        for idx in np.flatnonzero(keep):
            entries.append((abs(float(alpha[idx])), order[dim], -1 if layer is None else layer, int(idx), dim, layer))
    entries.sort(key=lambda e: e[:4])
    alive = {(d, l): int(k.sum()) for d, l, _, k in state.vectors()}
    base = state.surviving()
    before = obj(base["h"], base["a"], base["k"], base["v"], base["f"])

    def savings(subset):
        dims = {"h": base["h"], "a": list(base["a"]), "k": list(base["k"]), "v": list(base["v"]), "f": list(base["f"])}
        for i in subset:
            _, _, _, _, dim, layer = entries[i]
            if dim == "h":
                dims["h"] -= 1
            else:
                dims[dim][layer] -= 1
        return before - obj(**dims)

    def valid(subset):
        used = {}
        for i in subset:
            key = (entries[i][4], entries[i][5])
            used[key] = used.get(key, 0) + 1
        return all(used[k] < alive[k] for k in used)

    best = None
    n = len(entries)
    for size in range(1, n + 1):
        for subset in itertools.combinations(range(n), size):
            if valid(subset) and savings(subset) >= target:
                r = max(subset)
                best = r if best is None else min(best, r)
    if best is None:
        return None
    chosen, used = [], {}
    for i in range(best + 1):
        key = (entries[i][4], entries[i][5])
        if used.get(key, 0) + 1 < alive[key]:
            used[key] = used.get(key, 0) + 1
            chosen.append((entries[i][4], entries[i][5], entries[i][3]))
    return set(chosen)


def random_small_instance(rng):
    while True:
        ell = int(rng.integers(1, 3))
        h = int(rng.integers(1, 4))
        lay = {d: [int(x) for x in rng.integers(1, 3, ell)] for d in "akvf"}
        cfg = ArchConfig(ell=ell, h=h, vocab_size=int(rng.integers(2, 9)), max_positions=4, **lay)
        if h + sum(sum(lay[d]) for d in "akvf") <= 12:
            break
    state = random_state(cfg, rng, p_drop=0.0)
    if rng.random() < 0.3:
        # a few exact ties exercise the deterministic tie-break
        for _, _, alpha, _ in state.vectors():
            alpha[rng.random(alpha.size) < 0.3] = 0.5
    objective = "params" if rng.random() < 0.6 else "flops"
    flags = WEIGHTS_ONLY if rng.random() < 0.5 else None
    return cfg, state, objective, flags
