"""Command-line harness: make-model, decode, bench, heatmap, flops.

Model sources (``--dlm`` / ``--guider``) are one of:

* a path to a ``.dlmw`` weight file,
* ``random:d=8,h=2,layers=1,d_ff=16,V=11,L=32,seed=7`` (seeded init in memory),
* ``rule:V=11,p=0.9,seed=3[,blind_p=0.3]`` (rule model).

The denoiser defaults to bidirectional attention and the guider to causal,
unless the source names a ``mode``.  Settings resolve as: command-line flag,
then ``--config`` file (``key=value`` lines), then built-in defaults.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import _kernels
from .denoise import HEURISTICS, decode_baseline
from .diagnostics import flops_analytic, kv_similarity_heatmap, write_heatmap
from .errors import ConfigurationError, DLMError, InputError
from .freecache import decode_freecache
from .guided import DETERMINISTIC, STOCHASTIC, GuidanceConfig, decode_guided
from .models import BIDIRECTIONAL, CAUSAL, ModelSpec, Transformer, init_weights
from .rules import RuleModel, rule_match_rate, rule_prompt
from .weights_io import load_weights, save_weights, weights_checksum

SCHEMA = 1
POLICIES = ("baseline", "freecache", "guided", "guided_stochastic")
DEFAULTS = {
    "block_cache_size": 256,
    "max_output_tokens_freecache": 256,
    "max_output_tokens_guided": 1024,
    "speculation_block_size": 32,
    "topk_assisted_selection": 2,
    "guidance_confidence_threshold": 0.5,
}
REPORT_FIELDS = ("schema", "record", "policy", "gen_len", "prompt_len", "steps", "dlm_passes", "ar_passes",
                 "total_flops", "rule_match_rate", "mean_prefix", "tokens_checksum", "wall_ms")


def default_seed() -> int:
    return int(os.environ.get("DLMFP_SEED", "0"))


@dataclass
class RunConfig:
    dlm: str | None = None
    guider: str | None = None
    prompt_file: str | None = None
    rule_task: bool = False
    prompt_len: int = 4
    gen_len: int | None = None
    policy: str = "baseline"
    heuristic: str = "maskgit_confidence"
    steps: int | None = None
    block_size: int = DEFAULTS["block_cache_size"]
    speculation_block: int = DEFAULTS["speculation_block_size"]
    topk_match: int = DEFAULTS["topk_assisted_selection"]
    tau: float = DEFAULTS["guidance_confidence_threshold"]
    fallback_source: str = "dlm"
    match: str = "prefix"
    seed: int = 0
    out: str | None = None
    format: str = "json"

    def resolved_gen_len(self) -> int:
        if self.gen_len is not None:
            return self.gen_len
        if self.policy.startswith("guided"):
            return DEFAULTS["max_output_tokens_guided"]
        return DEFAULTS["max_output_tokens_freecache"]

    def guidance(self) -> GuidanceConfig:
        mode = STOCHASTIC if self.policy == "guided_stochastic" else DETERMINISTIC
        return GuidanceConfig(self.speculation_block, self.topk_match, self.tau, mode, self.fallback_source,
                              self.match)


def _coerce(name: str, raw):
    kinds = {f.name: f.type for f in fields(RunConfig)}
    if name not in kinds:
        raise ConfigurationError(f"unknown config key {name!r}")
    kind = kinds[name]
    if raw is None or not isinstance(raw, str):
        return raw
    if "bool" in kind:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if "int" in kind:
        return int(raw)
    if "float" in kind:
        return float(raw)
    return raw.strip()


def read_config_file(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        out[key] = _coerce(key, value)
    return out


def build_config(args: argparse.Namespace) -> RunConfig:
    values = {"seed": default_seed()}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    cfg = RunConfig(**values)
    if cfg.policy not in POLICIES:
        raise ConfigurationError(f"unknown policy {cfg.policy!r}")
    if cfg.heuristic not in HEURISTICS:
        raise ConfigurationError(f"unknown heuristic {cfg.heuristic!r}")
    if cfg.format not in ("json", "csv"):
        raise ConfigurationError(f"unknown report format {cfg.format!r}")
    return cfg


def _kv_pairs(text: str) -> dict[str, str]:
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in part:
            raise ConfigurationError(f"expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def parse_spec(text: str, mode: str = BIDIRECTIONAL) -> ModelSpec:
    kv = _kv_pairs(text)
    try:
        return ModelSpec(d=int(kv["d"]), h=int(kv.get("h", 1)), n_layers=int(kv.get("layers", 1)),
                         d_ff=int(kv.get("d_ff", 4 * int(kv["d"]))), V=int(kv["V"]), L_max=int(kv.get("L", 64)),
                         mode=kv.get("mode", mode))
    except KeyError as exc:
        raise ConfigurationError(f"model spec is missing {exc.args[0]!r}") from None


def load_model(source: str, default_mode: str, seed: int, p_override: float | None = None):
    if source.startswith("rule:"):
        kv = _kv_pairs(source[5:])
        blind = kv.get("blind_p")
        p = float(kv.get("p", 1.0)) if p_override is None else p_override
        return RuleModel(int(kv.get("V", 11)), p, int(kv.get("seed", seed)), kv.get("mode", default_mode),
                         None if blind is None else float(blind))
    if source.startswith("random:"):
        kv = _kv_pairs(source[7:])
        spec = parse_spec(source[7:], default_mode)
        return Transformer(spec, init_weights(spec, int(kv.get("seed", seed))))
    spec, weights = load_weights(source)
    return Transformer(spec, weights)


def read_prompt_file(path) -> np.ndarray:
    toks = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if line:
            try:
                toks.append(int(line))
            except ValueError:
                raise InputError(f"{path}:{lineno}: not an integer token id: {line!r}") from None
    if not toks:
        raise InputError(f"{path}: no tokens")
    return np.asarray(toks, dtype=np.int64)


def tokens_checksum(tokens) -> str:
    h = _kernels.FNV_OFFSET
    for t in np.asarray(tokens, dtype=np.int64):
        h = ((h ^ int(t)) * _kernels.FNV_PRIME) & _kernels.MASK64
    return f"{h:016x}"


def run_decode(cfg: RunConfig, dlm=None, guider=None) -> dict:
    """Run one decode and return its report record (nothing is written)."""
    if cfg.dlm is None and dlm is None:
        raise ConfigurationError("--dlm is required")
    dlm = dlm or load_model(cfg.dlm, BIDIRECTIONAL, cfg.seed)
    if cfg.rule_task:
        prompt = rule_prompt(dlm.vocab_size, cfg.prompt_len, cfg.seed)
    elif cfg.prompt_file:
        prompt = read_prompt_file(cfg.prompt_file)
    else:
        raise ConfigurationError("give --prompt-file or --rule-task")
    gen_len = cfg.resolved_gen_len()
    if cfg.policy == "baseline":
        tokens, trace = decode_baseline(dlm, prompt, gen_len, cfg.steps, cfg.heuristic, cfg.block_size)
    elif cfg.policy == "freecache":
        tokens, trace = decode_freecache(dlm, prompt, gen_len, cfg.block_size, cfg.steps, cfg.heuristic)
    else:
        if cfg.guider is None and guider is None:
            raise ConfigurationError(f"policy {cfg.policy} needs --guider")
        guider = guider or load_model(cfg.guider, CAUSAL, cfg.seed)
        tokens, trace = decode_guided(dlm, guider, prompt, gen_len, cfg.guidance(), cfg.block_size)
    guided_ks = [s.guided.k for s in trace.steps if s.guided is not None]
    return {
        "schema": SCHEMA,
        "record": "decode",
        "policy": cfg.policy,
        "gen_len": gen_len,
        "prompt_len": int(prompt.size),
        "steps": len(trace),
        "dlm_passes": trace.dlm_passes,
        "ar_passes": trace.ar_passes,
        "total_flops": trace.total_flops,
        "rule_match_rate": rule_match_rate(tokens, prompt.size, dlm.vocab_size - 1) if cfg.rule_task else None,
        "mean_prefix": float(np.mean(guided_ks)) if guided_ks else None,
        "tokens_checksum": tokens_checksum(tokens),
        "wall_ms": round(trace.wall_ms, 3),
    }


def write_records(records: list[dict], out: str | None, fmt: str, extra_fields=()) -> None:
    """Append records as JSON lines or CSV; all records are formatted before anything is written."""
    columns = list(REPORT_FIELDS) + [c for c in extra_fields if c not in REPORT_FIELDS]
    if fmt == "json":
        text = "".join(json.dumps(r, sort_keys=False) + "\n" for r in records)
    else:
        from io import StringIO
        buf = StringIO()
        w = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore")
        if out is None or not Path(out).exists() or Path(out).stat().st_size == 0:
            w.writeheader()
        for r in records:
            if r.get("record") != "header":
                w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})
        text = buf.getvalue()
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "a") as fh:
            fh.write(text)


def _split(text, cast):
    if text is None:
        return None
    return [cast(x) for x in str(text).split(",") if x.strip()]


def _seed_list(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        if "-" in part.strip()[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part.strip():
            out.append(int(part))
    return out


def run_bench(cfg: RunConfig, sweep: dict) -> list[dict]:
    """Cartesian sweep; each cell gets a pass-count speedup against the sequential baseline."""
    axes = {
        "policy": sweep.get("policy") or [cfg.policy],
        "steps": sweep.get("steps") or [cfg.steps],
        "block_size": sweep.get("block_size") or [cfg.block_size],
        "topk_match": sweep.get("topk_match") or [cfg.topk_match],
        "tau": sweep.get("tau") or [cfg.tau],
        "agreement": sweep.get("agreement") or [None],
        "seed": sweep.get("seed") or [cfg.seed],
    }
    if any(len(v) == 0 for v in axes.values()):
        raise ConfigurationError("sweep axes must be non-empty")
    header = {"schema": SCHEMA, "record": "header", "defaults": dict(DEFAULTS),
              "config": asdict(cfg), "sweep": {k: v for k, v in axes.items()}}
    records = [header]
    reference = {}
    for combo in itertools.product(*axes.values()):
        cell = dict(zip(axes, combo))
        ccfg = replace(cfg, policy=cell["policy"], steps=cell["steps"], block_size=cell["block_size"],
                       topk_match=cell["topk_match"], tau=cell["tau"], seed=cell["seed"])
        dlm = load_model(ccfg.dlm, BIDIRECTIONAL, ccfg.seed)
        guider = None
        if ccfg.policy.startswith("guided"):
            if ccfg.guider is None:
                raise ConfigurationError(f"policy {ccfg.policy} needs --guider")
            p = cell["agreement"] if ccfg.guider.startswith("rule:") else None
            guider = load_model(ccfg.guider, CAUSAL, ccfg.seed, p_override=p)
        rec = run_decode(ccfg, dlm, guider)
        key = (ccfg.seed, rec["gen_len"])
        if key not in reference:
            ref_cfg = replace(ccfg, policy="baseline", steps=None, gen_len=rec["gen_len"])
            reference[key] = run_decode(ref_cfg, dlm)["dlm_passes"]
        rec.update({k: cell[k] for k in ("block_size", "topk_match", "tau", "agreement", "seed")})
        rec["requested_steps"] = cell["steps"]
        rec["speedup"] = reference[key] / rec["dlm_passes"] if rec["dlm_passes"] else None
        records.append(rec)
    return records


BENCH_EXTRA = ("requested_steps", "block_size", "topk_match", "tau", "agreement", "seed", "speedup")


def _add_run_args(p: argparse.ArgumentParser, sweep: bool = False) -> None:
    p.add_argument("--config", help="key=value file; command-line flags take precedence")
    p.add_argument("--dlm", help="denoiser source (file, random:..., rule:...)")
    p.add_argument("--guider", help="guider source (file, random:..., rule:...)")
    p.add_argument("--prompt-file", help="token ids, one per line")
    p.add_argument("--rule-task", action="store_const", const=True, default=None,
                   help="synthesize a rule-consistent prompt and score the output")
    p.add_argument("--prompt-len", type=int)
    p.add_argument("--gen-len", type=int)
    p.add_argument("--heuristic", choices=sorted(HEURISTICS))
    p.add_argument("--fallback-source", choices=("dlm", "ar"))
    p.add_argument("--match", choices=("prefix", "count"))
    p.add_argument("--speculation-block", type=int)
    p.add_argument("--out", help="append report records here (default: stdout)")
    p.add_argument("--format", choices=("json", "csv"))
    if sweep:
        p.add_argument("--policy", default=None, help="comma-separated policies")
        p.add_argument("--steps", default=None, help="comma-separated step counts")
        p.add_argument("--block-size", default=None, help="comma-separated block sizes")
        p.add_argument("--topk-match", default=None, help="comma-separated K values")
        p.add_argument("--tau", default=None, help="comma-separated thresholds")
        p.add_argument("--agreement", default=None, help="comma-separated guider competences (rule guiders)")
        p.add_argument("--seed", default=None, help="seeds, e.g. 0-9,20")
    else:
        p.add_argument("--policy", choices=POLICIES)
        p.add_argument("--steps", type=int)
        p.add_argument("--block-size", type=int)
        p.add_argument("--topk-match", type=int)
        p.add_argument("--tau", type=float)
        p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dlmfp", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    mk = sub.add_parser("make-model", help="seeded init, saved to a weight file")
    mk.add_argument("--d", type=int, default=8)
    mk.add_argument("--h", type=int, default=2)
    mk.add_argument("--layers", type=int, default=1)
    mk.add_argument("--d-ff", type=int, default=16)
    mk.add_argument("--vocab", type=int, default=11)
    mk.add_argument("--max-len", type=int, default=32)
    mk.add_argument("--mode", choices=(BIDIRECTIONAL, CAUSAL), default=BIDIRECTIONAL)
    mk.add_argument("--seed", type=int, default=None)
    mk.add_argument("--out", required=True)

    _add_run_args(sub.add_parser("decode", help="decode once under one policy"))
    _add_run_args(sub.add_parser("bench", help="sweep policies and settings"), sweep=True)

    hm = sub.add_parser("heatmap", help="K/V step-to-step similarity, written as CSV + JSON")
    hm.add_argument("--dlm", required=True)
    hm.add_argument("--prompt-file")
    hm.add_argument("--rule-task", action="store_true")
    hm.add_argument("--prompt-len", type=int, default=4)
    hm.add_argument("--gen-len", type=int, required=True)
    hm.add_argument("--steps", type=int)
    hm.add_argument("--heuristic", choices=sorted(HEURISTICS), default="maskgit_confidence")
    hm.add_argument("--layer", type=int, default=0)
    hm.add_argument("--kind", choices=("K", "V"), default="V")
    hm.add_argument("--seed", type=int, default=None)
    hm.add_argument("--out", required=True, help="output prefix")

    fl = sub.add_parser("flops", help="analytic per-module FLOPs for one step")
    fl.add_argument("--spec", help="d=..,h=..,layers=..,d_ff=..,V=..")
    fl.add_argument("--dlm", help="take the spec from a model source instead")
    fl.add_argument("--L", type=int, required=True)
    fl.add_argument("--l", type=int)
    fl.add_argument("--mode", choices=("ar_decode_step", "dlm_step", "dlm_windowed_step"), default="dlm_step")
    fl.add_argument("--window", type=int)
    return parser


def _cmd_make_model(args) -> int:
    seed = default_seed() if args.seed is None else args.seed
    spec = ModelSpec(args.d, args.h, args.layers, args.d_ff, args.vocab, args.max_len, args.mode)
    checksum = save_weights(spec, init_weights(spec, seed), args.out)
    spec2, weights2 = load_weights(args.out)
    if spec2 != spec or weights_checksum(weights2) != checksum:
        raise DLMError("written weight file failed validation")
    print(f"{checksum:016x}  {args.out}")
    return 0


def _cmd_decode(args) -> int:
    cfg = build_config(args)
    rec = run_decode(cfg)
    write_records([rec], cfg.out, cfg.format)
    return 0


def _cmd_bench(args) -> int:
    sweep = {
        "policy": _split(args.policy, str), "steps": _split(args.steps, int),
        "block_size": _split(args.block_size, int), "topk_match": _split(args.topk_match, int),
        "tau": _split(args.tau, float), "agreement": _split(args.agreement, float),
        "seed": _seed_list(args.seed) if args.seed else None,
    }
    for k in ("policy", "steps", "block_size", "topk_match", "tau", "seed"):
        setattr(args, k, None)
    cfg = build_config(args)
    records = run_bench(cfg, sweep)
    write_records(records, cfg.out, cfg.format, BENCH_EXTRA)
    return 0


def _cmd_heatmap(args) -> int:
    seed = default_seed() if args.seed is None else args.seed
    model = load_model(args.dlm, BIDIRECTIONAL, seed)
    if not isinstance(model, Transformer):
        raise ConfigurationError("heatmaps need a transformer denoiser")
    if args.rule_task:
        prompt = rule_prompt(model.vocab_size, args.prompt_len, seed)
    elif args.prompt_file:
        prompt = read_prompt_file(args.prompt_file)
    else:
        raise ConfigurationError("give --prompt-file or --rule-task")
    hm = kv_similarity_heatmap(model, prompt, args.gen_len, args.steps, args.heuristic, args.layer, args.kind)
    for path in write_heatmap(hm, args.out):
        print(path)
    return 0


def _cmd_flops(args) -> int:
    if args.spec:
        spec = parse_spec(args.spec)
    elif args.dlm:
        model = load_model(args.dlm, BIDIRECTIONAL, default_seed())
        if not isinstance(model, Transformer):
            raise ConfigurationError("rule models perform no matmuls")
        spec = model.spec
    else:
        raise ConfigurationError("give --spec or --dlm")
    out = flops_analytic(spec, args.L, args.l, args.mode, args.window)
    print(json.dumps({"schema": SCHEMA, "mode": args.mode, "L": args.L, "l": args.l, "window": args.window,
                      "flops": out}))
    return 0


COMMANDS = {"make-model": _cmd_make_model, "decode": _cmd_decode, "bench": _cmd_bench,
            "heatmap": _cmd_heatmap, "flops": _cmd_flops}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (DLMError, OSError, ValueError) as exc:
        print(f"dlmfp {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
