"""Command-line entry point.

    python -m pdalign gen-data --out runs/data --preset standard
    python -m pdalign train --data runs/data/data.txt --out runs/t0 --preset desk
    python -m pdalign eval --model runs/t0/model.npz --data runs/data/data.txt
    python -m pdalign sweep --data d.txt --out runs/sw --param gamma --values 0,0.5,1
    python -m pdalign ablate --data d.txt --out runs/ab --seeds 0,1,2 --jobs 2
    python -m pdalign grad-check --seed 7

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import tempfile
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .data import STANDARD_TASK, SynthConfig, load_feature_file, synth_pda_generate, write_feature_file
from .errors import ConfigError, PdaError
from .nn_core import ClassifierParams, EncoderParams, param_hash
from .pseudo_label import Prototypes
from .trainer import (ARMS, SWEEPABLE, EpochReport, TrainConfig, TrainedModel, ablate,
                      desk_config, evaluate, gradient_audit, sweep, train)

log = logging.getLogger("pdalign")

REPORT_KEYS = ("epoch", "l_ce", "l_comp", "l_inter", "l_intra", "l_ent", "total",
               "n_tau", "accuracy", "tau", "wall_ms")
GRAD_TOL = 1e-4


class UsageError(Exception):
    """Bad flags or config, or a missing input file; maps to exit code 2."""


# -- config files ------------------------------------------------------------

def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _schema(cls) -> dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _coerce(key: str, raw: Any, typ: type) -> Any:
    if not isinstance(raw, str):
        return raw
    try:
        if typ is bool:
            return _parse_bool(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise UsageError(f"config key {key!r}: {exc}") from None


def parse_config_text(text: str, cls) -> dict[str, Any]:
    """Parse flat ``key = value`` (or ``key: value``) lines against ``cls``'s fields."""
    schema = _schema(cls)
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":"
        key, found, value = line.partition(sep)
        key = key.strip()
        if not found or not key:
            raise UsageError(f"line {lineno}: expected 'key = value', got {line!r}")
        if key not in schema:
            raise UsageError(f"line {lineno}: unknown config key {key!r}")
        if key in out:
            raise UsageError(f"line {lineno}: duplicate config key {key!r}")
        out[key] = _coerce(key, value, schema[key])
    return out


def format_config(cfg) -> str:
    lines = []
    for k, v in dataclasses.asdict(cfg).items():
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = format(v, ".17g")
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def resolve_config(cls, layers: Sequence[dict[str, Any]]):
    """Merge ``layers`` left to right over ``cls`` defaults and validate."""
    merged: dict[str, Any] = {}
    for layer in layers:
        merged.update(layer)
    try:
        return cls(**merged)
    except (ConfigError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


# -- output helpers ----------------------------------------------------------

def atomic_write(path: Path, payload: str | bytes) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = payload.encode("utf-8") if isinstance(payload, str) else payload
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _num(v) -> str:
    if v is None:
        return "null"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if not np.isfinite(v):
        raise ValueError(f"cannot serialize non-finite value {v}")
    return format(v, ".17g")


def report_to_json(r: EpochReport) -> str:
    row = dataclasses.asdict(r)
    parts = []
    for k in REPORT_KEYS:
        val = row[k]
        text = "[" + ", ".join(_num(t) for t in val) + "]" if k == "tau" else _num(val)
        parts.append(f'"{k}": {text}')
    return "{" + ", ".join(parts) + "}"


def emit_reports(reports: Sequence[EpochReport], fmt: str, out_path: str | Path) -> Path:
    """Serialize epoch reports as a JSON array or CSV table, 17 significant digits."""
    if not reports:
        raise ValueError("no reports to emit")
    if fmt == "json":
        text = "[\n" + ",\n".join(report_to_json(r) for r in reports) + "\n]\n"
    elif fmt == "csv":
        k = len(reports[0].tau)
        cols = [c for c in REPORT_KEYS if c != "tau"]
        header = cols[:-1] + [f"tau_{i}" for i in range(k)] + ["wall_ms"]
        rows = [",".join(header)]
        for r in reports:
            d = dataclasses.asdict(r)
            cells = ["" if d[c] is None else _num(d[c]) for c in cols[:-1]]
            cells += [_num(t) for t in r.tau] + [_num(r.wall_ms)]
            rows.append(",".join(cells))
        text = "\n".join(rows) + "\n"
    else:
        raise ValueError(f"format must be 'json' or 'csv', got {fmt!r}")
    out_path = Path(out_path)
    atomic_write(out_path, text)
    return out_path


@dataclass
class RunManifest:
    command: str
    config: dict[str, Any]
    data_fingerprint: str
    tool_version: str = __version__
    seed: int = 0
    extra: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"


def _write_json(path: Path, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- model files -------------------------------------------------------------

def save_model(model: TrainedModel, path: Path) -> None:
    arrays = {k: v.data for k, v in model.parameters().items()}
    arrays["proto.centroids"] = model.prototypes.centroids
    arrays["proto.initialized"] = model.prototypes.initialized
    arrays["config"] = np.array(json.dumps(dataclasses.asdict(model.config), sort_keys=True))
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".npz")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path: Path) -> TrainedModel:
    try:
        with np.load(path, allow_pickle=False) as z:
            cfg = TrainConfig(**json.loads(str(z["config"])))
            enc = EncoderParams(z["enc.w1"], z["enc.b1"], z["enc.w2"], z["enc.b2"],
                                dropout=cfg.dropout, latent_activation=cfg.latent_activation)
            cls = ClassifierParams(z["cls.w1"], z["cls.b1"], z["cls.w2"], z["cls.b2"])
            protos = Prototypes(z["proto.centroids"].copy(), z["proto.initialized"].copy())
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot read model file {path}: {exc}") from None
    return TrainedModel(enc, cls, protos, cfg)


# -- argument parsing --------------------------------------------------------

def _add_schema_flags(p: argparse.ArgumentParser, cls, skip: tuple[str, ...] = ()) -> None:
    group = p.add_argument_group(f"{cls.__name__} overrides")
    for name, typ in _schema(cls).items():
        if name in skip:
            continue
        group.add_argument("--" + name.replace("_", "-"), dest="cfg_" + name, default=None,
                           metavar=typ.__name__.upper(),
                           type=_parse_bool if typ is bool else typ)


def _cli_layer(ns: argparse.Namespace, cls) -> dict[str, Any]:
    return {name: getattr(ns, "cfg_" + name) for name in _schema(cls)
            if getattr(ns, "cfg_" + name, None) is not None}


def _file_layer(path: str | None, cls) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    return parse_config_text(text, cls)


def _csv_list(kind):
    def conv(text: str):
        try:
            return [kind(t) for t in text.split(",") if t.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated {kind.__name__}s") from None
    return conv


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pdalign", description="Partial domain adaptation trainer.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--preset", choices=("default", "standard"), default="default")
    _add_schema_flags(g, SynthConfig)

    def train_like(name: str, help_: str) -> argparse.ArgumentParser:
        q = sub.add_parser(name, help=help_)
        q.add_argument("--data", required=True)
        q.add_argument("--out", required=True)
        q.add_argument("--config")
        q.add_argument("--preset", choices=("default", "desk"), default="default")
        _add_schema_flags(q, TrainConfig)
        return q

    t = train_like("train", "train one model")
    t.add_argument("--format", choices=("json", "csv"), default="json")

    s = train_like("sweep", "final accuracy over values of gamma or eta")
    s.add_argument("--param", required=True, choices=SWEEPABLE)
    s.add_argument("--values", required=True, type=_csv_list(float))
    s.add_argument("--jobs", type=int, default=1)

    a = train_like("ablate", "train every ablation arm for several seeds")
    a.add_argument("--seeds", required=True, type=_csv_list(int))
    a.add_argument("--arms", type=_csv_list(str), default=list(ARMS))
    a.add_argument("--jobs", type=int, default=1)

    e = sub.add_parser("eval", help="target accuracy of a saved model")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")

    c = sub.add_parser("grad-check", help="finite-difference check of every loss term")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=GRAD_TOL)
    return p


# -- commands ----------------------------------------------------------------

def _load_data(path: str):
    if not Path(path).is_file():
        raise UsageError(f"data file not found: {path}")
    return load_feature_file(path)


def _train_config(ns) -> TrainConfig:
    preset = dataclasses.asdict(desk_config()) if ns.preset == "desk" else {}
    return resolve_config(TrainConfig, [preset, _file_layer(ns.config, TrainConfig),
                                        _cli_layer(ns, TrainConfig)])


def _cmd_gen_data(ns) -> int:
    preset = dataclasses.asdict(STANDARD_TASK) if ns.preset == "standard" else {}
    cfg = resolve_config(SynthConfig, [preset, _file_layer(ns.config, SynthConfig),
                                       _cli_layer(ns, SynthConfig)])
    try:
        pair = synth_pda_generate(cfg)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out, suffix=".tmp")
    os.close(fd)
    try:
        write_feature_file(pair, tmp)
        os.replace(tmp, out / "data.txt")
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    manifest = RunManifest("gen-data", dataclasses.asdict(cfg), pair.fingerprint(), seed=cfg.seed)
    atomic_write(out / "manifest.json", manifest.to_json())
    print(f"wrote {out / 'data.txt'} ({pair.n_source} source, {pair.n_target} target)")
    return 0


def _cmd_train(ns) -> int:
    cfg = _train_config(ns)
    data = _load_data(ns.data)
    out = Path(ns.out)
    model, reports = train(cfg, data)
    ext = "json" if ns.format == "json" else "csv"
    emit_reports(reports, ns.format, out / f"reports.{ext}")
    save_model(model, out / "model.npz")
    last = reports[-1]
    summary = {
        "epochs": len(reports),
        "final_accuracy": last.accuracy,
        "final_n_tau": last.n_tau,
        "final_total": last.total,
        "init_hash": model.init_hash,
        "param_hash": param_hash(model.parameters()),
    }
    _write_json(out / "summary.json", summary)
    atomic_write(out / "config.txt", format_config(cfg))
    manifest = RunManifest("train", dataclasses.asdict(cfg), data.fingerprint(), seed=cfg.seed,
                           extra={"preset": ns.preset, "format": ns.format})
    atomic_write(out / "manifest.json", manifest.to_json())
    acc = "n/a" if last.accuracy is None else f"{last.accuracy:.4f}"
    print(f"epochs={len(reports)} final_accuracy={acc} n_tau={last.n_tau}")
    return 0


def _cmd_eval(ns) -> int:
    if not Path(ns.model).is_file():
        raise UsageError(f"model file not found: {ns.model}")
    model = load_model(Path(ns.model))
    data = _load_data(ns.data)
    acc = evaluate(model, data)
    print(f"accuracy={acc:.17g}")
    if ns.out:
        out = Path(ns.out)
        _write_json(out / "eval.json", {"accuracy": acc, "n_target": data.n_target})
        manifest = RunManifest("eval", dataclasses.asdict(model.config), data.fingerprint(),
                               seed=model.config.seed, extra={"model": str(ns.model)})
        atomic_write(out / "manifest.json", manifest.to_json())
    return 0


def _cmd_sweep(ns) -> int:
    cfg = _train_config(ns)
    data = _load_data(ns.data)
    if not ns.values:
        raise UsageError("--values needs at least one number")
    rows = sweep(cfg, data, ns.param, ns.values, n_jobs=ns.jobs)
    out = Path(ns.out)
    text = f"{ns.param},accuracy\n" + "".join(f"{_num(v)},{_num(a)}\n" for v, a in rows)
    atomic_write(out / "sweep.csv", text)
    manifest = RunManifest("sweep", dataclasses.asdict(cfg), data.fingerprint(), seed=cfg.seed,
                           extra={"param": ns.param, "values": ns.values, "preset": ns.preset})
    atomic_write(out / "manifest.json", manifest.to_json())
    for v, a in rows:
        print(f"{ns.param}={v:g} accuracy={a:.4f}")
    return 0


def _cmd_ablate(ns) -> int:
    cfg = _train_config(ns)
    data = _load_data(ns.data)
    unknown = [a for a in ns.arms if a not in ARMS + ("source_only",)]
    if unknown:
        raise UsageError(f"unknown arm(s): {', '.join(unknown)}")
    if not ns.seeds:
        raise UsageError("--seeds needs at least one seed")
    report = ablate(cfg, data, ns.seeds, arms=tuple(ns.arms), n_jobs=ns.jobs)
    out = Path(ns.out)
    payload = {
        "seeds": report.seeds,
        "arms": {arm: {"accuracies": report.accuracies[arm], "mean": report.mean(arm),
                       "std": report.std(arm), "init_hashes": report.init_hashes[arm]}
                 for arm in report.accuracies},
    }
    _write_json(out / "ablation.json", payload)
    lines = ["arm,mean,std," + ",".join(f"seed_{s}" for s in report.seeds)]
    for arm, accs in report.accuracies.items():
        lines.append(",".join([arm, _num(report.mean(arm)), _num(report.std(arm))]
                              + [_num(a) for a in accs]))
    atomic_write(out / "ablation.csv", "\n".join(lines) + "\n")
    manifest = RunManifest("ablate", dataclasses.asdict(cfg), data.fingerprint(), seed=cfg.seed,
                           extra={"seeds": ns.seeds, "arms": ns.arms, "preset": ns.preset})
    atomic_write(out / "manifest.json", manifest.to_json())
    for arm in report.accuracies:
        print(f"{arm:>15}: mean={report.mean(arm):.4f} std={report.std(arm):.4f}")
    return 0


def _cmd_grad_check(ns) -> int:
    errs = gradient_audit(seed=ns.seed, fd_epsilon=ns.eps)
    worst = max(errs.values())
    for name, err in errs.items():
        print(f"{name:>8}: {err:.3e}")
    verdict = "pass" if worst < ns.tol else "FAIL"
    print(f"max relative error {worst:.3e} ({verdict}, tol {ns.tol:g})")
    return 0 if worst < ns.tol else 1


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "ablate": _cmd_ablate,
    "grad-check": _cmd_grad_check,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[ns.command](ns)
    except UsageError as exc:
        print(f"pdalign {ns.command}: error: {exc}", file=sys.stderr)
        return 2
    except (PdaError, OSError, ValueError) as exc:
        print(f"pdalign {ns.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> int:
    return run(sys.argv[1:])
