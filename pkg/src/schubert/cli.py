"""Command-line entry points: pretrain, prune, report, count, sweep-layers.

Exit codes: 0 ok, 1 validation error, 2 infeasible pruning target,
3 numeric failure.  Every command that writes a directory also writes
``manifest.json`` there; it is the only file that carries timestamps.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .autograd import DimensionError, NonFiniteError
from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from .config import PRESETS, ArchConfig, ConfigError, PruneConfig, load_preset
from .cost import CostContractError, CountFlags, compute_betas, count_flops, count_params
from .data import CorpusError, Vocab, build_vocab, collate, generate_synthetic_corpus, make_examples
from .model import init_model
from .prune import InfeasibleTargetError, PruneRoundRecord, run_schedule
from .training import TrainingDiverged, evaluate, train

EXIT_OK, EXIT_VALIDATION, EXIT_INFEASIBLE, EXIT_NUMERIC = 0, 1, 2, 3


class ReportFormatError(ValueError):
    pass


# -- manifest --------------------------------------------------------------------------
def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    arguments: dict
    seed: int | None
    inputs: dict = field(default_factory=dict)  # path -> sha256
    outputs: list = field(default_factory=list)
    started: str = ""
    finished: str = ""

    @property
    def run_id(self):
        """Content hash of command, arguments and inputs; stable across reruns."""
        args = {k: v for k, v in self.arguments.items() if k != "out"}
        key = json.dumps([self.command, args, self.inputs], sort_keys=True)
        return hashlib.sha256(key.encode()).hexdigest()[:16]

    def add_input(self, path):
        if path is not None and Path(path).is_file():
            self.inputs[str(path)] = _sha256(path)

    def write(self, out_dir):
        self.finished = _now()
        d = asdict(self)
        d["run_id"] = self.run_id
        Path(out_dir, "manifest.json").write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _start(command, args, seed):
    arguments = {k: v for k, v in vars(args).items() if k != "func"}
    return RunManifest(command, json.loads(json.dumps(arguments, default=str)), seed, started=_now())


# -- helpers ---------------------------------------------------------------------------
def resolve_config(name):
    """An :class:`ArchConfig` from a preset name or a JSON file path."""
    if name in PRESETS:
        return load_preset(name)
    path = Path(name)
    if not path.is_file():
        raise ConfigError(f"config {name!r} is neither a file nor a preset ({', '.join(sorted(PRESETS))})")
    return ArchConfig.load(path)


def _corpus_text(path, seed):
    if path is None:
        return generate_synthetic_corpus(seed, 2000)
    return Path(path).read_text(encoding="utf-8")


def _fmt(x):
    return repr(float(x))


# -- pretrain --------------------------------------------------------------------------
def cmd_pretrain(config, corpus=None, steps=400, seed=0, out="run", lr=1e-3, batch_size=32, args=None):
    """Train from initialisation; writes model.ckpt, vocab.txt, loss.csv."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _start("pretrain", args or argparse.Namespace(config=str(config), corpus=corpus, steps=steps,
                                                              seed=seed, lr=lr, batch_size=batch_size), seed)
    manifest.add_input(corpus)
    cfg = config if isinstance(config, ArchConfig) else resolve_config(config)
    text = _corpus_text(corpus, seed)
    vocab = build_vocab(text, cfg.vocab_size)
    weights = init_model(cfg, seed=seed)
    examples = make_examples(text, vocab, [seed, 1], max_positions=cfg.max_positions)
    batches = _batches(examples, batch_size)
    rows = []
    train(weights, batches, steps, lr=lr, log=lambda e: rows.append((e.step, e.mlm, e.nsp, e.total)))
    eval_examples = list(make_examples(text, vocab, [seed, 2], max_positions=cfg.max_positions, n_examples=128))
    mlm, nsp = evaluate(weights, [collate(eval_examples[i : i + 32]) for i in range(0, 128, 32)])

    vocab.save(out / "vocab.txt")
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "mlm", "nsp", "total"])
        for step, a, b, c in rows:
            w.writerow([step, _fmt(a), _fmt(b), _fmt(c)])
    meta = {"manifest": "manifest.json", "run_id": manifest.run_id, "steps": steps, "eval_mlm": mlm, "eval_nsp": nsp}
    save_checkpoint(weights, cfg, out / "model.ckpt", metadata=meta)
    manifest.outputs = ["model.ckpt", "vocab.txt", "loss.csv"]
    manifest.write(out)
    return {"eval_mlm": mlm, "eval_nsp": nsp, "ln_vocab": math.log(cfg.vocab_size), "steps": steps}


def _batches(stream, size):
    while True:
        yield collate([next(stream) for _ in range(size)])


# -- prune -----------------------------------------------------------------------------
def cmd_prune(checkpoint, corpus=None, out="pruned", prune_config=None, vocab=None, overrides=None, args=None):
    """Run the pruning schedule; writes pruned.ckpt, rounds.jsonl, config.json."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint = Path(checkpoint)
    pcfg = PruneConfig.load(prune_config).to_dict() if prune_config else PruneConfig().to_dict()
    pcfg.update({k: v for k, v in (overrides or {}).items() if v is not None})
    pcfg = PruneConfig.from_dict(pcfg)
    manifest = _start("prune", args or argparse.Namespace(checkpoint=str(checkpoint), corpus=corpus,
                                                           prune_config=prune_config, **(overrides or {})), pcfg.seed)
    vocab_path = Path(vocab) if vocab else checkpoint.parent / "vocab.txt"
    for p in (checkpoint, corpus, prune_config, vocab_path):
        manifest.add_input(p)
    weights, cfg = load_checkpoint(checkpoint)
    if not vocab_path.is_file():
        raise CorpusError(f"vocabulary file {vocab_path} not found (pass --vocab)")
    voc = Vocab.load(vocab_path)
    text = _corpus_text(corpus, pcfg.seed)
    final, records = run_schedule(weights, pcfg, text, voc)
    with open(out / "rounds.jsonl", "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
    final.config.save(out / "config.json")
    save_checkpoint(final, final.config, out / "pruned.ckpt", metadata={"manifest": "manifest.json", "run_id": manifest.run_id})
    manifest.outputs = ["pruned.ckpt", "rounds.jsonl", "config.json"]
    manifest.write(out)
    return records


# -- report ----------------------------------------------------------------------------
DIM_ROWS = ("h", "a", "k", "v", "f")


def _config_rows(round_index, cfg, seq_len):
    bd = count_params(cfg)
    rows = [[round_index, "h", cfg.h] + [""] * cfg.ell]
    for d in DIM_ROWS[1:]:
        values = list(getattr(cfg, d))
        rows.append([round_index, d, sum(values)] + values)
    rows.append([round_index, "params", bd.total] + [l.total for l in bd.layers])
    per_layer = [count_flops(ArchConfig(1, cfg.h, [cfg.a[i]], [cfg.k[i]], [cfg.v[i]], [cfg.f[i]], vocab_size=cfg.vocab_size,
                                        max_positions=cfg.max_positions), seq_len) for i in range(cfg.ell)]
    rows.append([round_index, "flops", sum(per_layer)] + per_layer)
    return rows


def _read_records(path):
    records = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(PruneRoundRecord.from_json(line))
            ArchConfig.from_dict(records[-1].config)
        except (json.JSONDecodeError, TypeError, ConfigError, KeyError) as exc:
            raise ReportFormatError(f"{path}:{n}: malformed round record ({exc})") from None
    return records


def report_table(source, seq_len=128):
    """``(columns, rows)`` for a config JSON, a round-records JSONL or a JSON report."""
    path = Path(source)
    text = path.read_text()
    stripped = text.strip()
    if path.suffix != ".jsonl" and stripped.startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ReportFormatError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
        if "columns" in doc and "rows" in doc:
            return list(doc["columns"]), [list(r) for r in doc["rows"]]
        cfg = ArchConfig.from_dict(doc.get("arch", doc))
        return _columns(cfg.ell), _config_rows(0, cfg, seq_len)
    records = _read_records(path)
    if not records:
        return ["round", "dimension", "total"], []
    ell = ArchConfig.from_dict(records[0].config).ell
    rows = []
    for r in records:
        rows += _config_rows(r.round, ArchConfig.from_dict(r.config), seq_len)
    return _columns(ell), rows


def _columns(ell):
    return ["round", "dimension", "total"] + [f"layer_{i + 1}" for i in range(ell)]


def render_csv(columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


def render_json(columns, rows):
    return json.dumps({"columns": columns, "rows": rows}, indent=1) + "\n"


def parse_csv_report(text):
    """Inverse of :func:`render_csv`; integers come back as ints, blanks as ''."""
    reader = csv.reader(io.StringIO(text))
    columns = next(reader)
    rows = []
    for row in reader:
        rows.append([cell if (i == 1 or cell == "") else int(cell) for i, cell in enumerate(row)])
    return columns, rows


def cmd_report(source, fmt="csv", seq_len=128):
    columns, rows = report_table(source, seq_len)
    if fmt == "csv":
        return render_csv(columns, rows)
    if fmt == "json":
        return render_json(columns, rows)
    raise ReportFormatError(f"unknown format {fmt!r}")


# -- count -----------------------------------------------------------------------------
def cmd_count(config, flags=None, seq_len=128, objective="params"):
    cfg = config if isinstance(config, ArchConfig) else resolve_config(config)
    flags = flags or CountFlags()
    bd = count_params(cfg, flags, seq_len)
    betas = compute_betas(cfg, objective, flags, seq_len)
    return {"breakdown": bd.to_dict(), "betas": betas.summary(), "beta_detail": betas.to_dict()}


def _format_count(result):
    bd = result["breakdown"]
    lines = [
        f"word embeddings      {bd['word_embeddings']:>14,}",
        f"position embeddings  {bd['position_embeddings']:>14,}",
        f"segment embeddings   {bd['segment_embeddings']:>14,}",
        f"embedding layer norm {bd['embedding_layer_norm']:>14,}",
    ]
    for i, layer in enumerate(bd["layers"], start=1):
        lines.append(f"layer {i:<3} attention   {layer['attention']:>12,}  feed-forward {layer['feed_forward']:>12,}")
    lines += [
        f"pooler               {bd['pooler']:>14,}",
        f"nsp classifier       {bd['nsp']:>14,}",
        f"mlm bias             {bd['mlm_bias']:>14,}",
        f"total parameters     {bd['total']:>14,}  ({bd['total'] / 1e6:.2f}M)",
        f"flops (MACs)         {bd['flops']:>14,}",
        "betas  " + "  ".join(f"{k}={v:.4g}" for k, v in result["betas"].items()),
    ]
    return "\n".join(lines) + "\n"


# -- sweep -----------------------------------------------------------------------------
def _closest_h(base, ell, budget):
    """Largest-h config with ``ell`` layers at or nearest the parameter budget."""

    def make(h):
        if ell == base.ell:
            a, k, v, f = base.a, base.k, base.v, base.f
        else:
            lay = base.layer(0)
            a, k, v, f = ([lay[d]] * ell for d in ("a", "k", "v", "f"))
        return ArchConfig(ell=ell, h=h, a=a, k=k, v=v, f=f, vocab_size=base.vocab_size,
                          max_positions=base.max_positions, layer_norm_eps=base.layer_norm_eps)

    lo, hi = 1, 2
    while count_params(make(hi)).total < budget:
        hi *= 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if count_params(make(mid)).total <= budget:
            lo = mid
        else:
            hi = mid
    best = min((lo, hi), key=lambda h: abs(count_params(make(h)).total - budget))
    return make(best)


def cmd_sweep_layers(config, layers, budget=None, corpus=None, steps=100, seed=0, out="sweep", lr=1e-3,
                     batch_size=16, tolerance=0.02, args=None):
    """Shrink ``h`` to fit the budget at each depth, pretrain briefly and evaluate."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    base = config if isinstance(config, ArchConfig) else resolve_config(config)
    budget = count_params(base).total if budget is None else int(budget)
    manifest = _start("sweep-layers", args or argparse.Namespace(config=str(config), layers=list(layers),
                                                                  budget=budget, steps=steps, seed=seed), seed)
    manifest.add_input(corpus)
    text = _corpus_text(corpus, seed)
    vocab = build_vocab(text, base.vocab_size)
    rows = []
    for n, ell in enumerate(layers):
        if ell < 1:
            raise ConfigError(f"layer counts must be >= 1 (got {ell})")
        cfg = _closest_h(base, ell, budget)
        params = count_params(cfg).total
        err = (params - budget) / budget
        row = {"ell": ell, "h": cfg.h, "params": params, "budget": budget, "rel_error": err}
        if abs(err) > tolerance:
            row.update(status="infeasible", mlm="", nsp="")
        else:
            row_seed = [seed, n]
            w = init_model(cfg, seed=row_seed)
            train(w, _batches(make_examples(text, vocab, [seed, n, 1], max_positions=cfg.max_positions), batch_size),
                  steps, lr=lr)
            held = list(make_examples(text, vocab, [seed, n, 2], max_positions=cfg.max_positions, n_examples=64))
            mlm, nsp = evaluate(w, [collate(held[i : i + 32]) for i in range(0, 64, 32)])
            row.update(status="ok", mlm=mlm, nsp=nsp)
        rows.append(row)
    cols = ["ell", "h", "params", "budget", "rel_error", "status", "mlm", "nsp"]
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (_fmt(v) if isinstance(v, float) else v) for k, v in r.items()})
    manifest.outputs = ["sweep.csv"]
    manifest.write(out)
    return rows


# -- argument parsing ------------------------------------------------------------------
def build_parser():
    p = argparse.ArgumentParser(prog="schubert", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="write a synthetic corpus")
    g.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    g.add_argument("--sentences", type=int, default=2000, help="sentence count (default 2000)")
    g.add_argument("--vocab-hint", type=int, default=200, help="distinct words (default 200)")
    g.add_argument("--out", required=True, help="output text file")

    t = sub.add_parser("pretrain", help="train a model from initialisation")
    t.add_argument("--config", default="toy", help="preset name or config JSON (default toy)")
    t.add_argument("--corpus", help="corpus text file (default: synthetic corpus from --seed)")
    t.add_argument("--steps", type=int, default=400, help="Adam steps (default 400)")
    t.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    t.add_argument("--lr", type=float, default=1e-3, help="learning rate (default 1e-3)")
    t.add_argument("--batch-size", type=int, default=32, help="batch size (default 32)")
    t.add_argument("--out", default="run", help="output directory (default run)")

    r = sub.add_parser("prune", help="run the pruning schedule on a checkpoint")
    r.add_argument("--checkpoint", required=True, help="checkpoint written by pretrain")
    r.add_argument("--config", dest="prune_config", help="prune config JSON (defaults below otherwise)")
    r.add_argument("--corpus", help="corpus text file (default: synthetic corpus from --seed)")
    r.add_argument("--vocab", help="vocabulary file (default: vocab.txt next to the checkpoint)")
    r.add_argument("--seed", type=int, help="RNG seed (default 0)")
    r.add_argument("--gamma", type=float, help="L1 coefficient (default 0.01)")
    r.add_argument("--eta", type=float, help="total objective reduction fraction (default 0.3)")
    r.add_argument("--rounds", type=int, help="number of rounds T (default 3)")
    r.add_argument("--objective", choices=["params", "flops"], help="objective (default params)")
    r.add_argument("--penalty", choices=["l1", "prox"], help="penalty mode (default l1)")
    r.add_argument("--steps", type=int, help="fine-tune steps per round (default 40)")
    r.add_argument("--out", default="pruned", help="output directory (default pruned)")

    rep = sub.add_parser("report", help="per-layer tables from a config, round records or JSON report")
    rep.add_argument("input", help="config JSON, rounds.jsonl or report JSON")
    rep.add_argument("--format", choices=["csv", "json"], default="csv", help="output format (default csv)")
    rep.add_argument("--seq-len", type=int, default=128, help="sequence length for FLOPs (default 128)")
    rep.add_argument("--out", help="output file (default stdout)")

    c = sub.add_parser("count", help="parameter/FLOPs breakdown and cost weights")
    c.add_argument("--config", required=True, help="preset name or config JSON")
    c.add_argument("--weights-only", action="store_true", help="count weight tensors only")
    for flag in ("biases", "layer-norms", "heads", "position-segment"):
        c.add_argument(f"--no-{flag}", action="store_true", help=f"exclude {flag.replace('-', ' ')}")
    c.add_argument("--objective", choices=["params", "flops"], default="params", help="beta objective")
    c.add_argument("--seq-len", type=int, default=128, help="sequence length for FLOPs (default 128)")
    c.add_argument("--json", action="store_true", help="print JSON instead of text")

    s = sub.add_parser("sweep-layers", help="compare depths at a fixed parameter budget")
    s.add_argument("--config", default="toy", help="base preset or config JSON (default toy)")
    s.add_argument("--layers", required=True, help="comma-separated layer counts, e.g. 2,4,6")
    s.add_argument("--budget", type=int, help="parameter budget (default: base model size)")
    s.add_argument("--corpus", help="corpus text file (default: synthetic corpus from --seed)")
    s.add_argument("--steps", type=int, default=100, help="pretrain steps per row (default 100)")
    s.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    s.add_argument("--out", default="sweep", help="output directory (default sweep)")
    return p


def _run(args):
    if args.command == "gen-corpus":
        Path(args.out).write_text(generate_synthetic_corpus(args.seed, args.sentences, args.vocab_hint), encoding="utf-8")
        return
    if args.command == "pretrain":
        res = cmd_pretrain(args.config, args.corpus, args.steps, args.seed, args.out, args.lr, args.batch_size, args)
        print(f"eval mlm {res['eval_mlm']:.4f} (ln V = {res['ln_vocab']:.4f}), nsp {res['eval_nsp']:.4f}")
        return
    if args.command == "prune":
        overrides = {
            "seed": args.seed, "gamma": args.gamma, "eta": args.eta, "rounds": args.rounds,
            "objective": args.objective, "penalty": args.penalty, "finetune_steps": args.steps,
        }
        records = cmd_prune(args.checkpoint, args.corpus, args.out, args.prune_config, args.vocab, overrides, args)
        for r in records:
            print(f"round {r.round}: params {r.params_before:,} -> {r.params_after:,}, "
                  f"mlm {r.mlm_before_finetune:.4f} -> {r.mlm_after_finetune:.4f}")
        return
    if args.command == "report":
        text = cmd_report(args.input, args.format, args.seq_len)
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
        return
    if args.command == "count":
        flags = CountFlags.weights_only() if args.weights_only else CountFlags(
            not args.no_biases, not args.no_layer_norms, not args.no_heads, not args.no_position_segment)
        res = cmd_count(args.config, flags, args.seq_len, args.objective)
        sys.stdout.write(json.dumps(res, indent=1) + "\n" if args.json else _format_count(res))
        return
    if args.command == "sweep-layers":
        try:
            layers = [int(x) for x in args.layers.split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"--layers must be comma-separated integers (got {args.layers!r})") from None
        rows = cmd_sweep_layers(args.config, layers, args.budget, args.corpus, args.steps, args.seed, args.out, args=args)
        for r in rows:
            print(f"ell={r['ell']:<3} h={r['h']:<5} params={r['params']:,} {r['status']} mlm={r['mlm']}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _run(args)
    except InfeasibleTargetError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CorpusError, CheckpointFormatError, ReportFormatError, DimensionError,
            CostContractError, FileNotFoundError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
