"""Architecture description: one hidden size plus per-layer attention/FFN sizes."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

DIMENSIONS = ("h", "a", "k", "v", "f")
LAYER_DIMENSIONS = ("a", "k", "v", "f")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    """Design dimensions of a generalised BERT encoder.

    ``a``, ``k``, ``v`` and ``f`` hold one entry per encoder layer: heads,
    key/query size per head, value size per head and feed-forward width.
    The word-embedding width always equals ``h``.
    """

    ell: int
    h: int
    a: tuple
    k: tuple
    v: tuple
    f: tuple
    vocab_size: int = 30522
    max_positions: int = 512
    segment_types: int = 2
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        for name in LAYER_DIMENSIONS:
            object.__setattr__(self, name, tuple(int(x) for x in getattr(self, name)))
        self.validate()

    def validate(self):
        problems = []
        if self.ell < 1:
            problems.append(f"ell must be >= 1 (got {self.ell})")
        if self.h < 1:
            problems.append(f"h must be >= 1 (got {self.h})")
        for name in LAYER_DIMENSIONS:
            values = getattr(self, name)
            if len(values) != self.ell:
                problems.append(f"{name} has {len(values)} entries, expected ell={self.ell}")
            bad = [i for i, x in enumerate(values) if x < 1]
            if bad:
                problems.append(f"{name} must be >= 1 in every layer (violations at layers {bad})")
        if self.vocab_size < 1 or self.max_positions < 1:
            problems.append("vocab_size and max_positions must be >= 1")
        if self.segment_types != 2:
            problems.append(f"segment_types must be 2 (got {self.segment_types})")
        if not self.layer_norm_eps > 0:
            problems.append("layer_norm_eps must be > 0")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def uniform(cls, ell, h, a, k=None, v=None, f=None, **kw):
        """Identical layers; ``k``/``v`` default to h/a and ``f`` to 4h as in BERT."""
        k = h // a if k is None else k
        v = k if v is None else v
        f = 4 * h if f is None else f
        return cls(ell=ell, h=h, a=(a,) * ell, k=(k,) * ell, v=(v,) * ell, f=(f,) * ell, **kw)

    def layer(self, i):
        return {"a": self.a[i], "k": self.k[i], "v": self.v[i], "f": self.f[i]}

    def with_dim(self, dim, value, layer=None):
        """Copy with ``h`` or one layer's ``a``/``k``/``v``/``f`` replaced."""
        if dim == "h":
            return replace(self, h=value)
        values = list(getattr(self, dim))
        values[layer] = value
        return replace(self, **{dim: tuple(values)})

    def to_dict(self):
        d = asdict(self)
        for name in LAYER_DIMENSIONS:
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if isinstance(d, dict) and "arch" in d:
            d = d["arch"]
        return cls.from_dict(d)

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())


def toy_config(**kw):
    """Minutes-scale default used by tests and the CLI."""
    base = dict(ell=4, h=64, a=4, k=16, v=16, f=256, vocab_size=512, max_positions=64)
    base.update(kw)
    return ArchConfig.uniform(**base)


def bert_base(**kw):
    return ArchConfig.uniform(12, 768, 12, 64, 64, 3072, **kw)


PRESETS = {
    "toy": "toy.json",
    "bert-base": "bert_base.json",
    "schubert-all-99m": "schubert_all_99m.json",
    "schubert-all-88m": "schubert_all_88m.json",
    "schubert-h-77m": "schubert_h_77m.json",
    "schubert-h-66m": "schubert_h_66m.json",
    "schubert-h-55m": "schubert_h_55m.json",
    "schubert-h-43m": "schubert_h_43m.json",
    "schubert-h-33m": "schubert_h_33m.json",
}


def preset_path(name):
    return resources.files("schubert").joinpath("configs", PRESETS[name])


def load_preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ArchConfig.from_json(preset_path(name).read_text())


@dataclass
class PruneConfig:
    """Knobs of the regularise/truncate/extract/fine-tune loop."""

    gamma: float = 1e-2
    eta: float = 0.3
    rounds: int = 3
    objective: str = "params"
    penalty: str = "l1"
    regularize_steps: int = 20
    finetune_steps: int = 40
    alpha_lr: float = 1e-2
    finetune_lr: float = 1e-3
    batch_size: int = 16
    flops_seq_len: int = 128
    seed: int = 0
    eval_examples: int = 64
    count_flags: dict = field(default_factory=dict)

    def __post_init__(self):
        problems = []
        if not 0 <= self.eta < 1:
            problems.append(f"eta must satisfy 0 <= eta < 1 (got {self.eta})")
        if self.rounds < 1:
            problems.append(f"rounds must be >= 1 (got {self.rounds})")
        if self.gamma < 0:
            problems.append(f"gamma must be >= 0 (got {self.gamma})")
        if self.objective not in ("params", "flops"):
            problems.append(f"objective must be 'params' or 'flops' (got {self.objective!r})")
        if self.penalty not in ("l1", "prox"):
            problems.append(f"penalty must be 'l1' or 'prox' (got {self.penalty!r})")
        if self.regularize_steps < 0 or self.finetune_steps < 0:
            problems.append("step counts must be >= 0")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown prune config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"prune config is not valid JSON: {exc}") from None
        if "prune" in d:
            d = d["prune"]
        return cls.from_dict(d)
