"""Command-line entry point.

Usage::

    hybridnorm <command> [--config FILE] [--seed N] [--out-dir DIR] [--threads T] [key=value ...]

Commands: ``gradcheck``, ``bounds``, ``profile``, ``flops``, ``train``.
Configs are YAML files of flat namespaced keys (``model.layers: 4``);
nested mappings are flattened. ``key=value`` overrides are parsed as YAML
scalars. Every run writes ``manifest.json`` to the output directory; passing
that manifest back as ``--config`` replays the run.

Exit status: 0 all checks pass, 1 a verified property failed, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .attention import BOUND_VARIANTS
from .blocks import ConfigError, ModelConfig
from .diagnostics import (
    LEMMAS,
    DiagnosticsRecord,
    attention_entropy,
    bound_campaign,
    cost_report,
    derive_seed,
    lemma_gradcheck,
    per_layer_grad_norms,
    records_to_csv,
    token_cosine_similarity,
)
from .trainer import TrainConfig, _windows, synthetic_dataset, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

_MODEL_DEFAULTS = {f"model.{f.name}": f.default for f in fields(ModelConfig)}
_TRAIN_DEFAULTS = {
    f"train.{f.name}": f.default for f in fields(TrainConfig) if f.name not in ("model", "seed")
}
_DEFAULT_DIMS = [[3, 4, 2], [5, 8, 4]]

COMMAND_DEFAULTS: dict[str, dict] = {
    "gradcheck": {
        "gradcheck.variants": list(BOUND_VARIANTS),
        "gradcheck.dims": _DEFAULT_DIMS,
        "gradcheck.seeds": 20,
        "gradcheck.step": 1e-5,
        "gradcheck.abs_tol": 1e-6,
        "gradcheck.rel_tol": 1e-5,
    },
    "bounds": {
        "bounds.variants": list(BOUND_VARIANTS),
        "bounds.trials": 100,
        "bounds.dims": _DEFAULT_DIMS,
        "bounds.scale": 5.0,
        # which bound family decides the exit status: corrected | printed
        "bounds.gate": "corrected",
    },
    "profile": {
        **_MODEL_DEFAULTS,
        **_TRAIN_DEFAULTS,
        "profile.schemes": ["PreNorm", "PostNorm", "HybridNorm"],
        "profile.steps": [1, 100],
        "profile.batch": 4,
    },
    "flops": {
        "flops.schemes": ["PreNorm", "HybridNorm"],
        "flops.d": 1536,
        "flops.s": 4096,
        "flops.L": 16,
    },
    "train": {**_MODEL_DEFAULTS, **_TRAIN_DEFAULTS},
}
_SEEDED = {"gradcheck", "bounds", "profile", "train"}
_ALL_KEYS = {"seed"}.union(*COMMAND_DEFAULTS.values())


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _flatten(data: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in data.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value, default):
    """Align YAML scalars with the default's type (``1e-3`` loads as a string)."""
    if isinstance(value, str) and (isinstance(default, (int, float)) and not isinstance(default, bool) or default is None):
        for cast in (int, float):
            try:
                value = cast(value)
                break
            except ValueError:
                continue
        else:
            if default is not None:
                raise ConfigError(key, f"expected a number, got {value!r}")
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    return value


def load_config_file(path) -> tuple[dict, str | None]:
    """Flat key dict from a YAML config or a run manifest, plus the manifest's command."""
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError("--config", f"invalid YAML in {path}: {exc}") from None
    if data is None:
        return {}, None
    if not isinstance(data, dict):
        raise ConfigError("--config", "top level must be a mapping")
    if "manifest_version" in data:
        return dict(data["config"]), data["command"]
    return _flatten(data), None


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(text, "override must look like key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        return key, yaml.safe_load(raw)
    except yaml.YAMLError:
        raise ConfigError(key, f"cannot parse value {raw!r}") from None


def resolve_config(command: str, file_values: dict, overrides: list[str], seed: int | None) -> dict:
    """Defaults, then file values, then overrides, then ``--seed``."""
    defaults = COMMAND_DEFAULTS[command]
    cfg = dict(defaults)
    layered = dict(file_values)
    for item in overrides:
        k, v = parse_override(item)
        layered[k] = v
    if seed is not None:
        layered["seed"] = seed
    for key, value in layered.items():
        if key not in _ALL_KEYS:
            raise ConfigError(key, "unknown config key")
        if key == "seed":
            if command in _SEEDED:
                if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                    raise ConfigError("seed", f"must be a non-negative integer, got {value!r}")
                cfg["seed"] = value
            continue
        if key in defaults:
            cfg[key] = _coerce(key, value, defaults[key])
    if command in _SEEDED and "seed" not in cfg:
        raise ConfigError("seed", "required field missing (runs are never seeded from the clock)")
    return cfg


def _section(cfg: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def _model_config(cfg: dict, **extra) -> ModelConfig:
    data = {**_section(cfg, "model"), **extra}
    try:
        return ModelConfig(**data)
    except ConfigError as exc:
        raise ConfigError(f"model.{exc.field}", str(exc).split(": ", 1)[1]) from None
    except TypeError as exc:
        raise ConfigError("model", str(exc)) from None


def _train_config(cfg: dict, model: ModelConfig) -> TrainConfig:
    try:
        return TrainConfig(model=model, seed=cfg["seed"], **_section(cfg, "train"))
    except ConfigError as exc:
        field = exc.field if exc.field.startswith("model.") else f"train.{exc.field}"
        raise ConfigError(field, str(exc).split(": ", 1)[1]) from None
    except TypeError as exc:
        raise ConfigError("train", str(exc)) from None


def _dims(cfg: dict, key: str) -> list[tuple[int, int, int]]:
    dims = cfg[key]
    ok = isinstance(dims, list) and dims and all(
        isinstance(t, list) and len(t) == 3 and all(isinstance(v, int) and v >= 1 for v in t) for t in dims
    )
    if not ok:
        raise ConfigError(key, "must be a non-empty list of [s, d, d_k] positive integer triples")
    return [tuple(t) for t in dims]


def _positive_int(cfg: dict, key: str) -> int:
    v = cfg[key]
    if isinstance(v, bool) or not isinstance(v, int) or v < 1:
        raise ConfigError(key, f"must be a positive integer, got {v!r}")
    return v


def _str_list(cfg: dict, key: str, allowed=None) -> list[str]:
    v = cfg[key]
    if isinstance(v, str):
        v = [v]
    if not isinstance(v, list) or not v or not all(isinstance(x, str) for x in v):
        raise ConfigError(key, "must be a non-empty list of names")
    if allowed is not None:
        bad = [x for x in v if x not in allowed]
        if bad:
            raise ConfigError(key, f"unknown entry {bad[0]!r}; choose from {', '.join(allowed)}")
    return v


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


class Run:
    """Collects output files of one command and writes the manifest."""

    def __init__(self, command: str, cfg: dict, out_dir: Path, inputs: dict):
        self.command = command
        self.cfg = cfg
        self.out_dir = out_dir
        self.inputs = inputs
        self.outputs: dict[str, str] = {}
        self.started = _now()
        out_dir.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, text: str) -> Path:
        path = self.out_dir / name
        path.write_text(text)
        self.register(name)
        return path

    def register(self, name: str) -> None:
        self.outputs[name] = hashlib.sha256((self.out_dir / name).read_bytes()).hexdigest()

    def finish(self, status: int, summary: dict) -> int:
        manifest = {
            "manifest_version": 1,
            "command": self.command,
            "version": __version__,
            "seed": self.cfg.get("seed"),
            "config": self.cfg,
            "inputs": self.inputs,
            "outputs": dict(sorted(self.outputs.items())),
            "status": {EXIT_OK: "pass", EXIT_FAIL: "fail"}[status],
            "summary": summary,
            "started": self.started,
            "finished": _now(),
        }
        (self.out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return status


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def _table(header, rows) -> str:
    cells = [[str(h) for h in header]] + [[f"{v:.4g}" if isinstance(v, float) else str(v) for v in r] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gradcheck(cfg: dict, run: Run, lemmas: dict | None = None) -> int:
    variants = _str_list(cfg, "gradcheck.variants", list(LEMMAS))
    dims = _dims(cfg, "gradcheck.dims")
    rep = lemma_gradcheck(
        variants, dims, _positive_int(cfg, "gradcheck.seeds"), cfg["seed"],
        h=cfg["gradcheck.step"], abs_tol=cfg["gradcheck.abs_tol"], rel_tol=cfg["gradcheck.rel_tol"],
        lemmas=lemmas,
    )
    run.write("gradcheck.csv", _csv(
        ("variant", "s", "d", "dk", "seed", "weight", "abs_err", "rel_err", "ok"),
        [r[:-1] + (int(r[-1]),) for r in rep.rows],
    ))
    worst = [(v, w, a, r) for (v, w), (a, r) in rep.worst().items()]
    run.write("gradcheck_summary.csv", _csv(("variant", "weight", "max_abs_err", "max_rel_err"), worst))
    print(_table(("variant", "weight", "max_abs_err", "max_rel_err"), worst))
    for v, s, d, dk, k, w, ea, er, _ in rep.failures:
        print(f"FAIL {v} d{w} seed={k} dims=({s},{d},{dk}) abs={ea:.3e} rel={er:.3e}", file=sys.stderr)
    status = EXIT_OK if rep.passed else EXIT_FAIL
    return run.finish(status, {"checks": len(rep.rows), "failures": len(rep.failures)})


_EXPECTED_COUPLING = {"PreNorm": "scale", "PreQK": 1.0, "QKV": 1.0}


def cmd_bounds(cfg: dict, run: Run) -> int:
    variants = _str_list(cfg, "bounds.variants", list(BOUND_VARIANTS))
    dims = _dims(cfg, "bounds.dims")
    trials = _positive_int(cfg, "bounds.trials")
    gate = cfg["bounds.gate"]
    if gate not in ("corrected", "printed"):
        raise ConfigError("bounds.gate", "must be 'corrected' or 'printed'")
    scale = float(cfg["bounds.scale"])
    rows, summary_rows, coupling_rows = [], [], []
    failed = []
    for v in variants:
        c = bound_campaign(v, trials, dims, cfg["seed"], coupling_scale=scale)
        rows += c.rows
        for w in ("WQ", "WK", "WV", "WO"):
            summary_rows.append((v, w, c.max_slack.get(w, float("nan")), c.printed_max_slack.get(w, float("nan"))))
        expected = scale if _EXPECTED_COUPLING[v] == "scale" else 1.0
        coupling_rows.append((v, "WQ", scale, c.coupling_wq, c.printed_coupling_wq, expected))
        viol = c.violations if gate == "corrected" else c.printed_violations
        ratio = c.coupling_wq if gate == "corrected" else c.printed_coupling_wq
        if viol:
            failed.append(f"{v}: {viol} {gate}-bound violations in {c.checks} checks")
        if abs(ratio - expected) > 1e-9 * expected:
            failed.append(f"{v}: coupling ratio {ratio!r} != {expected!r}")
        print(f"{v}: checks={c.checks} violations={c.violations} printed_violations={c.printed_violations} "
              f"coupling_wq={c.coupling_wq:.12g}")
    run.write("bounds.csv", _csv(
        ("variant", "s", "d", "dk", "trial", "weight", "measured", "bound", "printed_bound",
         "violated", "printed_violated"), rows))
    run.write("bounds_slack.csv", _csv(("variant", "weight", "max_slack", "printed_max_slack"), summary_rows))
    run.write("coupling.csv", _csv(
        ("variant", "weight", "wk_scale", "bound_ratio", "printed_bound_ratio", "expected_ratio"), coupling_rows))
    for msg in failed:
        print("FAIL " + msg, file=sys.stderr)
    return run.finish(EXIT_FAIL if failed else EXIT_OK, {"gate": gate, "failures": failed})


def cmd_profile(cfg: dict, run: Run) -> int:
    from .blocks import BlockScheme

    schemes = _str_list(cfg, "profile.schemes")
    for s in schemes:
        try:
            BlockScheme.parse(s)
        except ValueError as exc:
            raise ConfigError("profile.schemes", str(exc)) from None
    steps = cfg["profile.steps"]
    if not isinstance(steps, list) or not steps or not all(isinstance(k, int) and k >= 1 for k in steps):
        raise ConfigError("profile.steps", "must be a non-empty list of positive step numbers")
    steps = sorted(set(steps))
    nb = _positive_int(cfg, "profile.batch")
    summary = {}
    for scheme in schemes:
        model = _model_config(cfg, block_scheme=scheme)
        tc = _train_config(cfg, model)
        if steps[-1] > tc.total_steps:
            raise ConfigError("profile.steps", f"step {steps[-1]} exceeds train.total_steps={tc.total_steps}")
        stream = synthetic_dataset(tc.dataset, derive_seed(tc.seed, 5), tc.dataset_length, model.vocab_size)
        batch = _windows(stream, np.random.default_rng(derive_seed(tc.seed, 6)), nb, model.context_length)
        records = []

        def snap(step, params, model=model, scheme=scheme, records=records, batch=batch):
            if step not in steps:
                return
            rec = DiagnosticsRecord(f"{scheme}-s{tc.seed}", scheme, model.init, tc.seed, step,
                                    metadata={"grad_norm": "per-layer L2 over all layer parameters, mean over sequences",
                                              "entropy": "attention-row Shannon entropy (interpretation)"})
            with np.errstate(all="ignore"):
                rec.add("grad_norm", per_layer_grad_norms(model, params, batch))
                rec.add("cosine", token_cosine_similarity(model, params, batch[0]))
                rec.add("entropy", attention_entropy(model, params, batch[0]))
            records.append(rec)

        log = train(tc, callback=snap, stop_after=steps[-1])
        for k in steps:
            if all(r.step != k for r in records):
                rec = DiagnosticsRecord(f"{scheme}-s{tc.seed}", scheme, model.init, tc.seed, k, divergent=True,
                                        metadata={"diverged_at": log.diverged_at})
                for metric in ("grad_norm", "cosine", "entropy"):
                    rec.add(metric, [math.nan] * model.layers)
                records.append(rec)
        records.sort(key=lambda r: r.step)
        run.write(f"profile_{scheme}.csv", records_to_csv(records))
        run.write(f"profile_{scheme}.json", "[\n" + ",\n".join(r.to_json() for r in records) + "\n]\n")
        summary[scheme] = {"diverged_at": log.diverged_at}
        print(f"{scheme}: snapshots={[r.step for r in records]} diverged_at={log.diverged_at}")
    return run.finish(EXIT_OK, summary)


def cmd_flops(cfg: dict, run: Run) -> int:
    schemes = _str_list(cfg, "flops.schemes", ["PreNorm", "HybridNorm"])
    d, s, L = (_positive_int(cfg, f"flops.{k}") for k in ("d", "s", "L"))
    reps = [cost_report(x, d, s, L) for x in schemes]
    rows = [r.as_row() for r in reps]
    header = list(rows[0])
    run.write("flops.csv", _csv(header, [[row[h] for h in header] for row in rows]))
    show = ("scheme", "norm_params", "main_params", "norm_flops", "main_flops", "param_ratio", "flops_ratio")
    print(_table(show, [[row[h] for h in show] for row in rows]))
    bad = [r.scheme for r in reps if r.model_matches is False]
    for name in bad:
        print(f"FAIL {name}: instantiated parameter counts differ from the closed form", file=sys.stderr)
    return run.finish(EXIT_FAIL if bad else EXIT_OK, {"mismatches": bad})


def cmd_train(cfg: dict, run: Run) -> int:
    tc = _train_config(cfg, _model_config(cfg))
    log = train(tc, out_dir=run.out_dir)
    for name in ("metrics.csv", "eval.csv", "checkpoint.bin"):
        run.register(name)
    final = log.steps[-1]
    print(f"steps={final.step} loss={final.loss:.4f} diverged_at={log.diverged_at}")
    return run.finish(EXIT_OK, {"final_loss": final.loss if math.isfinite(final.loss) else None,
                                "diverged_at": log.diverged_at})


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "bounds": cmd_bounds,
    "profile": cmd_profile,
    "flops": cmd_flops,
    "train": cmd_train,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config or run manifest")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out-dir", default="runs", help="output directory (default: runs/<command>)")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1 for determinism)")
    parser = _Parser(prog="hybridnorm", description="Normalization-placement lab.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=COMMANDS[name].__name__.replace("cmd_", ""))
        p.add_argument("overrides", nargs="*", metavar="key=value")
    return parser


def main(argv=None, _lemmas: dict | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads", "must be >= 1")
        file_values, manifest_cmd = ({}, None) if args.config is None else load_config_file(args.config)
        if manifest_cmd is not None and manifest_cmd != args.command:
            raise ConfigError("--config", f"manifest is for {manifest_cmd!r}, not {args.command!r}")
        cfg = resolve_config(args.command, file_values, args.overrides, args.seed)
        out_dir = Path(args.out_dir)
        if args.out_dir == "runs":
            out_dir = out_dir / args.command
        run = Run(args.command, cfg, out_dir, {"config_file": args.config, "overrides": list(args.overrides),
                                               "threads": args.threads})
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            if args.command == "gradcheck":
                return cmd_gradcheck(cfg, run, _lemmas)
            return COMMANDS[args.command](cfg, run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
