"""Command-line entry point: ``crsn {datagen,train,eval,perturb,sweep,bench}``.

Settings come from three layers, later ones winning: built-in defaults, a
JSON config file (``--config``), then command-line flags. Unknown JSON keys
and out-of-range values are rejected with the dotted path of the field.

Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import math
import os
import sys
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import bench as bench_mod
from .data import CorpusSpec, PerturbationSpec, constants_sidecar, generate_corpus, load_corpus, save_corpus
from .errors import ConfigError, CrsnError, ParseError, SchemaError
from .model import PROFILES, AttnConfig, CrsnConfig, MlpConfig, load_checkpoint, save_checkpoint
from .objective import LossWeights, reports_to_csv
from .swarm import GATE_HIGH, GATE_LOW
from .training import (
    RESILIENCE_COLUMNS,
    TrainConfig,
    default_suite,
    evaluate,
    perturbation_eval,
    prepare_data,
    sweep_inertia,
    train,
)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
SUBCOMMANDS = ("datagen", "train", "eval", "perturb", "sweep", "bench")

CORPUS_FILE = "corpus.csv"
CONSTANTS_FILE = "corpus_constants.json"
CHECKPOINT_FILE = "model.ckpt"


class ConfigPathError(ConfigError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


# -----------------------------------------------------------------------------
# Schema
# -----------------------------------------------------------------------------


def _number(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _integer(lo=None):
    def check(x):
        if isinstance(x, bool) or not isinstance(x, int):
            return "expected an integer"
        if lo is not None and x < lo:
            return f"must be >= {lo}"
    return check


def _real(lo=None, hi=None, lo_open=False, hi_open=False):
    def check(x):
        if not _number(x):
            return "expected a finite number"
        if lo is not None and (x <= lo if lo_open else x < lo):
            return f"must be {'>' if lo_open else '>='} {lo}"
        if hi is not None and (x >= hi if hi_open else x > hi):
            return f"must be {'<' if hi_open else '<='} {hi}"
    return check


def _choice(options):
    def check(x):
        if x not in options:
            return f"expected one of {sorted(options)}"
    return check


def _optional(inner):
    def check(x):
        return None if x is None else inner(x)
    return check


def _list_of(inner, length=None, min_length=1):
    def check(x):
        if not isinstance(x, list):
            return "expected a list"
        if length is not None and len(x) != length:
            return f"expected exactly {length} entries"
        if len(x) < min_length:
            return f"expected at least {min_length} entries"
        for i, v in enumerate(x):
            msg = inner(v)
            if msg:
                return f"entry {i}: {msg}"
    return check


def _string(x):
    if not isinstance(x, str):
        return "expected a string"


def _suite(x):
    if x is None:
        return None
    if not isinstance(x, list) or not x:
        return "expected a non-empty list of perturbation objects"
    for i, spec in enumerate(x):
        if not isinstance(spec, dict):
            return f"entry {i}: expected an object"
        try:
            PerturbationSpec.from_dict(spec)
        except (ConfigError, TypeError) as exc:
            return f"entry {i}: {exc}"


# section -> key -> (default, validator). ``None`` defaults for d/L/m/groups
# mean "take the value from the selected profile".
SCHEMA = {
    "model": {
        "kind": ("crsn", _choice({"crsn", "mlp", "mini_attn"})),
        "profile": ("paper", _choice(set(PROFILES))),
        "d": (None, _optional(_integer(2))),
        "L": (None, _optional(_integer(1))),
        "m": (None, _optional(_integer(1))),
        "groups": (None, _optional(_integer(1))),
        "dropout": (0.25, _real(0.0, 1.0, hi_open=True)),
        "decoder_hidden": (128, _integer(1)),
        "hurst": (0.7, _real(0.0, 1.0, True, True)),
        "sigma_init": (0.05, _real(0.0)),
        "c1": (1.6, _real(0.0)),
        "c2": (1.6, _real(0.0)),
        "frozen_gate": (None, _optional(_real(GATE_LOW, GATE_HIGH, True, True))),
        "mlp_widths": ([512, 256, 128, 64], _list_of(_integer(1), length=4)),
        "mlp_dropout": (0.3, _real(0.0, 1.0, hi_open=True)),
        "attn_ff_width": (None, _optional(_integer(1))),
    },
    "training": {
        "batch_size": (64, _integer(1)),
        "max_epochs": (50, _integer(1)),
        "patience": (15, _integer(1)),
        "lr": (3e-4, _real(0.0)),
        "warmup": (1000, _integer(0)),
        "weight_decay": (1e-4, _real(0.0)),
        "beta1": (0.9, _real(0.0, 1.0, hi_open=True)),
        "beta2": (0.999, _real(0.0, 1.0, hi_open=True)),
        "seed": (42, _integer(0)),
        "min_delta": (1e-6, _real(0.0)),
    },
    "data": {
        "n": (6500, _integer(1)),
        "seed": (42, _integer(0)),
        "diurnal_amplitude": (0.15, _real(0.0)),
        "weekly_amplitude": (0.05, _real(0.0)),
        "rho": (0.8, _real(0.0, 1.0, hi_open=True)),
        "noise_scale": (0.1, _real(0.0)),
        "split": ([0.7, 0.15, 0.15], _list_of(_real(0.0, 1.0, True, True), length=3)),
        "window": (24, _integer(1)),
        "stride": (1, _integer(1)),
    },
    "objective": {
        "weights": ([0.5, 0.3, 0.2], _list_of(_real(0.0), length=3)),
        "tau": (20.0, _real(0.0, lo_open=True)),
        "thresholds": (0.9, _real(0.0, 1.0, True, True)),
    },
    "perturb": {
        "replicas": (3, _integer(1)),
        "noise": (0.1, _real(0.0)),
        "seed": (42, _integer(0)),
        "suite": (None, _suite),
    },
    "sweep": {
        "grid": ([0.35, 0.62, 0.85], _list_of(_real(GATE_LOW, GATE_HIGH, True, True))),
    },
    "bench": {
        "lengths": ([128, 256, 512, 1024, 2048],
                    _list_of(_integer(bench_mod.MIN_LENGTH), min_length=3)),
        "attn_max_length": (1024, _integer(bench_mod.MIN_LENGTH)),
        "reps": (9, _integer(5)),
        "batch": (4, _integer(1)),
        "warmup": (2, _integer(0)),
    },
    "paths": {
        "corpus": (None, _optional(_string)),
        "checkpoint": (None, _optional(_string)),
        "out": (".", _string),
    },
}


def defaults():
    return {sec: {k: copy.deepcopy(v[0]) for k, v in keys.items()} for sec, keys in SCHEMA.items()}


def _merge(base, layer, origin):
    if not isinstance(layer, dict):
        raise ConfigPathError(origin or "<root>", "expected a JSON object")
    for sec, values in layer.items():
        if sec not in SCHEMA:
            raise ConfigPathError(sec, "unknown key")
        if not isinstance(values, dict):
            raise ConfigPathError(sec, "expected a JSON object")
        for key, value in values.items():
            path = f"{sec}.{key}"
            if key not in SCHEMA[sec]:
                raise ConfigPathError(path, "unknown key")
            base[sec][key] = copy.deepcopy(value)


def _validate(values):
    for sec, keys in SCHEMA.items():
        for key, (_, check) in keys.items():
            msg = check(values[sec][key])
            if msg:
                raise ConfigPathError(f"{sec}.{key}", msg)
    m = values["model"]
    prof = PROFILES[m["profile"]]
    agents = m["m"] if m["m"] is not None else prof["agents"]
    groups = m["groups"] if m["groups"] is not None else prof["groups"]
    if agents % groups:
        raise ConfigPathError("model.groups", f"{groups} does not divide m={agents}")
    if abs(sum(values["data"]["split"]) - 1.0) > 1e-9:
        raise ConfigPathError("data.split", "ratios must sum to 1")
    try:
        LossWeights(*values["objective"]["weights"])
    except ValueError as exc:
        raise ConfigPathError("objective.weights", str(exc)) from None
    lengths = values["bench"]["lengths"]
    if any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ConfigPathError("bench.lengths", "must be strictly increasing")
    if max(lengths) > bench_mod.MAX_LENGTH:
        raise ConfigPathError("bench.lengths", f"must not exceed {bench_mod.MAX_LENGTH}")


@dataclass
class CliConfig:
    values: dict

    def __getitem__(self, section):
        return self.values[section]

    def crsn_config(self):
        m = self["model"]
        overrides = {k2: m[k1] for k1, k2 in (("d", "d_model"), ("L", "layers"), ("m", "agents"),
                                               ("groups", "groups")) if m[k1] is not None}
        return CrsnConfig.from_profile(
            m["profile"], window=self["data"]["window"], dropout=m["dropout"],
            decoder_hidden=m["decoder_hidden"], hurst=m["hurst"], sigma_init=m["sigma_init"],
            c1=m["c1"], c2=m["c2"], frozen_gate=m["frozen_gate"], **overrides)

    def model_config(self):
        m = self["model"]
        if m["kind"] == "crsn":
            return self.crsn_config()
        if m["kind"] == "mlp":
            return MlpConfig(tuple(m["mlp_widths"]), m["mlp_dropout"], m["decoder_hidden"])
        d = m["d"] or PROFILES[m["profile"]]["d_model"]
        return AttnConfig(d, self["data"]["window"], m["attn_ff_width"] or 4 * d, m["dropout"],
                          m["decoder_hidden"])

    def train_config(self):
        t, o, m = self["training"], self["objective"], self["model"]
        return TrainConfig(
            batch_size=t["batch_size"], max_epochs=t["max_epochs"], patience=t["patience"],
            weights=LossWeights(*o["weights"]), base_lr=t["lr"], warmup_steps=t["warmup"],
            weight_decay=t["weight_decay"], beta1=t["beta1"], beta2=t["beta2"], seed=t["seed"],
            model=m["kind"], profile=m["profile"], min_delta=t["min_delta"], tau=o["tau"],
            thresholds=o["thresholds"])

    def corpus_spec(self):
        d = self["data"]
        return CorpusSpec(d["n"], d["seed"], d["diurnal_amplitude"], d["weekly_amplitude"],
                          d["rho"], d["noise_scale"])

    def suite(self):
        p = self["perturb"]
        if p["suite"] is None:
            return default_suite(p["noise"])
        return [PerturbationSpec.from_dict(s) for s in p["suite"]]

    @property
    def out(self):
        return Path(self["paths"]["out"])

    def corpus_path(self):
        return Path(self["paths"]["corpus"]) if self["paths"]["corpus"] else self.out / CORPUS_FILE


def parse_config(path=None, overrides=None) -> CliConfig:
    """Defaults, then the JSON file at ``path`` (if any), then ``overrides``.

    ``overrides`` uses the same nested layout as the file.
    """
    values = defaults()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        try:
            layer = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        _merge(values, layer, "")
    if overrides:
        _merge(values, overrides, "")
    _validate(values)
    return CliConfig(values)


# -----------------------------------------------------------------------------
# Subcommands
# -----------------------------------------------------------------------------


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _rows_csv(rows, columns):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()


def _dataset(cfg: CliConfig):
    records, targets = load_corpus(cfg.corpus_path())
    d = cfg["data"]
    return records, targets, prepare_data(records, targets, d["window"], d["stride"], tuple(d["split"]))


def _require_checkpoint(cfg: CliConfig):
    ckpt = cfg["paths"]["checkpoint"]
    if not ckpt:
        raise ConfigPathError("paths.checkpoint", "required (set it in the config or pass --checkpoint)")
    return load_checkpoint(ckpt)[0]


def cmd_datagen(cfg: CliConfig):
    spec = cfg.corpus_spec()
    records, targets = generate_corpus(spec)
    cfg.corpus_path().parent.mkdir(parents=True, exist_ok=True)
    save_corpus(cfg.corpus_path(), records, targets)
    _write(cfg.out / CONSTANTS_FILE, constants_sidecar(spec))


def cmd_train(cfg: CliConfig):
    _, _, data = _dataset(cfg)
    model, history = train(cfg.train_config(), data, cfg.model_config(), log_every=1)
    ckpt = Path(cfg["paths"]["checkpoint"] or cfg.out / CHECKPOINT_FILE)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, model)
    _write(cfg.out / "history.jsonl", history.to_jsonl())


def cmd_eval(cfg: CliConfig):
    model = _require_checkpoint(cfg)
    _, _, data = _dataset(cfg)
    if model.meta.get("window") != data.window:
        raise ConfigPathError("data.window", f"checkpoint was trained with window "
                                             f"{model.meta.get('window')}, config has {data.window}")
    report = evaluate(model, data.test)
    _write(cfg.out / "metrics.json", report.to_json())
    _write(cfg.out / "metrics.csv", reports_to_csv([report]))


def cmd_perturb(cfg: CliConfig):
    model = _require_checkpoint(cfg)
    _, _, data = _dataset(cfg)
    records, targets = data.raw_test
    p = cfg["perturb"]
    out = perturbation_eval(model, records, targets, cfg.suite(), p["replicas"], p["seed"])
    out["suite"] = [s.to_dict() for s in cfg.suite()]
    _write(cfg.out / "resilience.json", _dump(out))
    _write(cfg.out / "resilience.csv", _rows_csv(out["rows"], RESILIENCE_COLUMNS))


def cmd_sweep(cfg: CliConfig):
    _, _, data = _dataset(cfg)
    rows = sweep_inertia(cfg.train_config(), data, cfg["sweep"]["grid"], cfg.crsn_config())
    _write(cfg.out / "sweep.json", _dump({"rows": rows}))
    _write(cfg.out / "sweep.csv", _rows_csv(rows, ("gate", "val_re_mae", "displacement", "epochs")))


def cmd_bench(cfg: CliConfig):
    b = cfg["bench"]
    crsn = cfg.crsn_config()
    series = []
    for kind in bench_mod.KINDS:
        lengths = b["lengths"] if kind == "sil" else [n for n in b["lengths"] if n <= b["attn_max_length"]]
        series.append(bench_mod.time_scaling(kind, lengths, b["reps"], crsn.profile, b["batch"],
                                             b["warmup"], cfg["training"]["seed"], config=crsn))
    _write(cfg.out / "bench.csv", bench_mod.bench_csv(series))
    _write(cfg.out / "bench.json", bench_mod.bench_summary(series, crsn))


COMMANDS = {
    "datagen": cmd_datagen,
    "train": cmd_train,
    "eval": cmd_eval,
    "perturb": cmd_perturb,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
}


# -----------------------------------------------------------------------------
# Argument handling
# -----------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a comma-separated list: {text!r}") from None
    return parse


def build_parser():
    p = _Parser(prog="crsn", description="Swarm-interaction sequence model toolkit.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--seed", type=int, help="seed for corpus, training and perturbations")
    p.add_argument("--out", help="output directory")
    p.add_argument("--n", type=int, help="number of hourly records to generate")
    p.add_argument("--profile", choices=sorted(PROFILES))
    p.add_argument("--model", choices=("crsn", "mlp", "mini_attn"))
    p.add_argument("--repeats", type=int, help="perturbation replicas / bench repetitions")
    p.add_argument("--lengths", type=_csv_list(int), help="bench sequence lengths")
    p.add_argument("--grid", type=_csv_list(float), help="inertia-gate values for sweep")
    p.add_argument("--corpus", help="corpus CSV path")
    p.add_argument("--checkpoint", help="checkpoint path")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def flag_overrides(args):
    """Translate parsed flags into the nested config layout."""
    o = {}

    def put(section, key, value):
        if value is not None:
            o.setdefault(section, {})[key] = value

    put("training", "seed", args.seed)
    put("data", "seed", args.seed)
    put("perturb", "seed", args.seed)
    put("data", "n", args.n)
    put("model", "profile", args.profile)
    put("model", "kind", args.model)
    if getattr(args, "subcommand", None) == "bench":
        put("bench", "reps", args.repeats)
    else:
        put("perturb", "replicas", args.repeats)
    put("bench", "lengths", args.lengths)
    put("sweep", "grid", args.grid)
    put("paths", "out", args.out)
    put("paths", "corpus", args.corpus)
    put("paths", "checkpoint", args.checkpoint)
    return o


def _thread_cap(subcommand):
    if subcommand == "bench":
        return nullcontext()  # the bench pins itself to one thread
    raw = os.environ.get("CRSN_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CRSN_THREADS: expected a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"CRSN_THREADS: expected a positive integer, got {raw!r}")
    return threadpool_limits(limits=n)


def _fail(code, message):
    print(f"crsn: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s", stream=sys.stderr)
        cfg = parse_config(args.config, flag_overrides(args))
        with _thread_cap(args.subcommand):
            COMMANDS[args.subcommand](cfg)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except (SchemaError, ParseError) as exc:
        return _fail(EXIT_IO, exc)
    except OSError as exc:
        return _fail(EXIT_IO, f"{exc.filename or ''}: {exc.strerror or exc}")
    except CrsnError as exc:
        return _fail(EXIT_RUNTIME, exc)
    except Exception as exc:  # anything unexpected still gets the one-line contract
        return _fail(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
