"""Command-line pipeline: baseline, extraction, training, evaluation.

Subcommands cover the full workflow; every one accepts ``--config``
with a flat JSON object whose keys mirror the long flag names
(underscored).  Explicit flags override the config file, which
overrides built-in defaults; defaults that fill a gap are printed.
Written artifacts are announced as ``wrote <path> sha256=<hex>`` and
failures exit 1 with a single ``SIM-ERR <code>: <message>`` line on
stderr.
"""

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .baseline_net import (
    LayeredNet,
    accuracy,
    augment_inputs,
    extract_states,
    load_bundle,
    load_dataset_csv,
    load_dataset_idx,
    load_net,
    net_nnz,
    rescale_layers,
    save_bundle,
    save_net,
    train_baseline,
)
from .evaluation import AttackConfig, SweepItem, evaluate, sweep
from .implicit_core import (
    Activation,
    PicardDivergenceError,
    load_model,
    model_to_bytes,
    save_model,
)
from .matrix_store import inf_norm
from .row_solver import Penalty, RowSolverError, SolverConfig
from .seeding import STREAM_SUBSAMPLE, derive_rng
from .sim_trainer import (
    TrainConfig,
    TrainError,
    rescaled_state_bundle,
    subsample_columns,
    train,
    write_row_report,
)


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _announce(path):
    print(f"wrote {path} sha256={_sha256(path)}")


def _load_config(path):
    try:
        with open(path, "r") as fh:
            cfg = json.load(fh)
    except OSError as err:
        raise CliError("E_IO", f"cannot read config: {err}")
    except json.JSONDecodeError as err:
        raise CliError("E_CONFIG", f"config is not valid JSON: {err}")
    if not isinstance(cfg, dict):
        raise CliError("E_CONFIG", "config must be a JSON object")
    return cfg


def _merge(args, spec):
    """CLI > config file > default; unknown config keys are rejected."""
    config = _load_config(args.config) if args.config else {}
    known = {key for key, _ in spec}
    for key in config:
        if key not in known:
            raise CliError("E_CONFIG", f"unknown config key {key!r}")
    merged = {}
    for key, default in spec:
        cli_value = getattr(args, key, None)
        if cli_value is not None:
            merged[key] = cli_value
        elif key in config:
            merged[key] = config[key]
        else:
            if default is _REQUIRED:
                raise CliError("E_CONFIG", f"missing required option --{key.replace('_', '-')}")
            merged[key] = default
            if default is not None:
                print(f"default {key}={default}")
    return merged


_REQUIRED = object()


def _data_dir(value):
    path = value or os.environ.get("SIM_DATA_DIR")
    if not path:
        raise CliError(
            "E_DATA", "no data directory: pass --data-dir or set SIM_DATA_DIR"
        )
    return path


def _load_split(opts, split):
    fmt = opts["format"]
    if fmt == "idx":
        try:
            return load_dataset_idx(_data_dir(opts["data_dir"]), split)
        except FileNotFoundError as err:
            raise CliError("E_DATA", str(err))
        except ValueError as err:
            raise CliError("E_DATA", f"bad IDX data: {err}")
    if fmt == "csv":
        key = "csv_train" if split == "train" else "csv_test"
        path = opts[key]
        if not path:
            raise CliError("E_CONFIG", f"--{key.replace('_', '-')} is required for csv format")
        try:
            return load_dataset_csv(path)
        except OSError as err:
            raise CliError("E_IO", str(err))
        except ValueError as err:
            raise CliError("E_DATA", f"bad CSV data: {err}")
    raise CliError("E_CONFIG", f"unknown data format {fmt!r}")


def _activation(name, slope):
    if name == "relu":
        return Activation("relu")
    if name == "identity":
        return Activation("identity")
    if name == "leaky_relu":
        return Activation("leaky_relu", slope)
    raise CliError("E_CONFIG", f"unknown activation {name!r}")


def _objective(opts):
    kind = opts["objective"]
    if kind == "none":
        return Penalty()
    if kind == "perspective":
        return Penalty("perspective", opts["alpha"])
    if kind == "l1":
        return Penalty("l1", opts["beta"])
    raise CliError("E_CONFIG", f"unknown objective {kind!r}")


def _train_config(opts, objective, workers=None):
    try:
        return TrainConfig(
            objective=objective,
            lam1=opts["lambda1"],
            lam2=opts["lambda2"],
            kappa=opts["kappa"],
            mode=opts["mode"],
            workers=workers if workers is not None else opts["workers"],
            solver=SolverConfig(max_iter=opts["max_iter"]),
            seed=opts["seed"],
        )
    except ValueError as err:
        raise CliError("E_CONFIG", str(err))


def _out_path(opts, name):
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out / name


_DATA_SPEC = [
    ("data_dir", None),
    ("format", "idx"),
    ("csv_train", None),
    ("csv_test", None),
]

_TRAIN_SPEC = [
    ("objective", "perspective"),
    ("alpha", 0.01),
    ("beta", 0.001),
    ("lambda1", 0.1),
    ("lambda2", 0.1),
    ("kappa", 0.99),
    ("mode", "relaxed"),
    ("workers", 1),
    ("max_iter", 50000),
    ("seed", 0),
]


def cmd_train_baseline(args):
    opts = _merge(
        args,
        _DATA_SPEC
        + [
            ("widths", "784,64,32,16,10"),
            ("activation", "relu"),
            ("slope", 0.1),
            ("epochs", 10),
            ("batch_size", 64),
            ("learning_rate", 0.1),
            ("bias", True),
            ("limit", None),
            ("seed", 0),
            ("out", "."),
        ],
    )
    widths = [int(w) for w in str(opts["widths"]).split(",") if w.strip()]
    if len(widths) < 2:
        raise CliError("E_CONFIG", "widths must list at least input and output sizes")
    U, labels = _load_split(opts, "train")
    if opts["limit"]:
        U, labels = U[:, : opts["limit"]], labels[: opts["limit"]]
    if widths[0] != U.shape[0]:
        raise CliError(
            "E_CONFIG",
            f"widths[0]={widths[0]} does not match input dimension {U.shape[0]}",
        )
    net = LayeredNet.initialize(
        widths,
        _activation(opts["activation"], opts["slope"]),
        seed=opts["seed"],
        use_bias=bool(opts["bias"]),
    )
    started = time.perf_counter()
    net = train_baseline(
        net,
        U,
        labels,
        epochs=opts["epochs"],
        batch_size=opts["batch_size"],
        learning_rate=opts["learning_rate"],
        seed=opts["seed"],
    )
    elapsed = time.perf_counter() - started
    print(f"train accuracy {accuracy(net, U, labels):.4f} ({elapsed:.1f}s)")
    try:
        U_test, y_test = _load_split(opts, "test")
        print(f"test accuracy {accuracy(net, U_test, y_test):.4f}")
    except CliError:
        print("test accuracy skipped: no test split")
    path = _out_path(opts, "baseline-net.bin")
    save_net(net, path)
    _announce(path)
    return 0


def cmd_extract(args):
    opts = _merge(
        args,
        _DATA_SPEC
        + [
            ("net", _REQUIRED),
            ("samples", None),
            ("kappa", 0.99),
            ("rescale", "model"),
            ("gamma", 1.5),
            ("seed", 0),
            ("out", "."),
        ],
    )
    net = _load_artifact(load_net, opts["net"], "net")
    U, _ = _load_split(opts, "train")
    if opts["samples"]:
        m = U.shape[1]
        if not 1 <= opts["samples"] <= m:
            raise CliError("E_CONFIG", f"samples must lie in [1, {m}]")
        idx = derive_rng(opts["seed"], STREAM_SUBSAMPLE).permutation(m)[: opts["samples"]]
        U = U[:, idx]
    mode = opts["rescale"]
    if mode == "layers":
        try:
            net = rescale_layers(net, opts["gamma"])
        except ValueError as err:
            raise CliError("E_CONFIG", str(err))
        bundle = extract_states(net, augment_inputs(net, U))
        scaled_net_path = _out_path(opts, "rescaled-net.bin")
        save_net(net, scaled_net_path)
        _announce(scaled_net_path)
    elif mode == "model":
        try:
            bundle, model = rescaled_state_bundle(
                net, augment_inputs(net, U), opts["kappa"]
            )
        except ValueError as err:
            raise CliError("E_TRAIN", str(err))
        model_path = _out_path(opts, "rescaled-model.bin")
        save_model(model, model_path)
        _announce(model_path)
    elif mode == "none":
        bundle = extract_states(net, augment_inputs(net, U))
    else:
        raise CliError("E_CONFIG", f"unknown rescale mode {mode!r}")
    path = _out_path(opts, "bundle.bin")
    save_bundle(bundle, path, rescale_mode=mode, kappa=opts["kappa"])
    print(f"bundle columns {bundle.n_columns} states {bundle.n_state}")
    _announce(path)
    return 0


def _load_artifact(loader, path, what):
    try:
        return loader(path)
    except OSError as err:
        raise CliError("E_IO", f"cannot read {what}: {err}")
    except ValueError as err:
        raise CliError("E_IO", f"corrupt {what} file: {err}")


def cmd_sim_train(args):
    opts = _merge(
        args,
        _TRAIN_SPEC
        + [
            ("bundle", _REQUIRED),
            ("net", _REQUIRED),
            ("samples", None),
            ("out", "."),
        ],
    )
    bundle, rescale_mode, bundle_kappa = _load_artifact(
        load_bundle, opts["bundle"], "bundle"
    )
    if args.kappa is None and rescale_mode == "model" and 0.0 < bundle_kappa < 1.0:
        opts["kappa"] = bundle_kappa
        print(f"using bundle kappa={bundle_kappa}")
    if opts["samples"]:
        try:
            bundle = subsample_columns(bundle, opts["samples"], seed=opts["seed"])
        except ValueError as err:
            raise CliError("E_CONFIG", str(err))
    net = _load_artifact(load_net, opts["net"], "net")
    config = _train_config(opts, _objective(opts))
    started = time.perf_counter()
    try:
        trained = train(
            bundle, config, activation=net.activation, baseline_nnz=net_nnz(net)
        )
    except (TrainError, RowSolverError) as err:
        raise CliError("E_TRAIN", str(err))
    elapsed = time.perf_counter() - started
    model = trained.model
    print(
        f"trained {len(trained.per_row)} rows in {elapsed:.1f}s: "
        f"nnz {trained.nnz} sparsity {trained.sparsity_pct:.2f}% "
        f"inf_norm(A) {inf_norm(model.A) if model.n else 0.0:.6f}"
    )
    model_path = _out_path(opts, "sim-model.bin")
    save_model(model, model_path)
    _announce(model_path)
    report_path = _out_path(opts, "sim-rows.csv")
    write_row_report(trained, report_path)
    _announce(report_path)
    return 0


def _eval_common(args, require_epsilon):
    opts = _merge(
        args,
        _DATA_SPEC
        + [
            ("model", _REQUIRED),
            ("net", _REQUIRED),
            ("epsilon", _REQUIRED if require_epsilon else 0.0),
            ("mask_fraction", 0.5),
            ("batch_size", 1024),
            ("limit", None),
            ("seed", 0),
            ("out", "."),
        ],
    )
    model = _load_artifact(load_model, opts["model"], "model")
    net = _load_artifact(load_net, opts["net"], "net")
    U, labels = _load_split(opts, "test")
    if opts["limit"]:
        U, labels = U[:, : opts["limit"]], labels[: opts["limit"]]
    attack = AttackConfig(
        epsilon=opts["epsilon"],
        mask_fraction=opts["mask_fraction"],
        seed=opts["seed"],
    )
    try:
        report = evaluate(
            model, net, U, labels, attack, batch_size=opts["batch_size"]
        )
    except PicardDivergenceError as err:
        raise CliError("E_TRAIN", str(err))
    print(
        f"clean {report.clean_accuracy:.4f} adversarial {report.adversarial_accuracy:.4f} "
        f"sparsity {report.sparsity_pct:.2f}% drop {report.accuracy_drop_pct:.2f}pts"
    )
    path = _out_path(opts, "eval.csv")
    with open(path, "w") as fh:
        fh.write(
            "epsilon,mask_fraction,seed,clean_accuracy,adversarial_accuracy,"
            "sparsity_pct,accuracy_drop_pct\n"
        )
        fh.write(
            f"{attack.epsilon},{attack.mask_fraction},{attack.seed},"
            f"{report.clean_accuracy},{report.adversarial_accuracy},"
            f"{report.sparsity_pct},{report.accuracy_drop_pct}\n"
        )
    _announce(path)
    return 0


def cmd_eval(args):
    return _eval_common(args, require_epsilon=False)


def cmd_attack(args):
    return _eval_common(args, require_epsilon=True)


def _int_list(text):
    return [int(v) for v in str(text).split(",") if str(v).strip()]


def _float_list(text):
    return [float(v) for v in str(text).split(",") if str(v).strip()]


def cmd_sweep(args):
    opts = _merge(
        args,
        _DATA_SPEC
        + _TRAIN_SPEC
        + [
            ("bundle", _REQUIRED),
            ("net", _REQUIRED),
            ("weights", None),
            ("samples_list", None),
            ("seeds", None),
            ("epsilon", 0.004),
            ("mask_fraction", 0.5),
            ("limit", None),
            ("out", "."),
        ],
    )
    bundle, _, _ = _load_artifact(load_bundle, opts["bundle"], "bundle")
    net = _load_artifact(load_net, opts["net"], "net")
    U, labels = _load_split(opts, "test")
    if opts["limit"]:
        U, labels = U[:, : opts["limit"]], labels[: opts["limit"]]
    kind = opts["objective"]
    default_weight = {"perspective": opts["alpha"], "l1": opts["beta"], "none": 0.0}[kind]
    weights = _float_list(opts["weights"]) if opts["weights"] else [default_weight]
    samples_list = (
        _int_list(opts["samples_list"]) if opts["samples_list"] else [bundle.n_columns]
    )
    seeds = _int_list(opts["seeds"]) if opts["seeds"] else [opts["seed"]]
    items = []
    for weight in weights:
        for samples in samples_list:
            for seed in seeds:
                objective = Penalty(kind, weight) if kind != "none" else Penalty()
                local = dict(opts)
                local["seed"] = seed
                config = _train_config(local, objective)
                attack = AttackConfig(
                    epsilon=opts["epsilon"],
                    mask_fraction=opts["mask_fraction"],
                    seed=seed,
                )
                items.append(
                    SweepItem(
                        train=config,
                        attack=attack,
                        samples=samples,
                        label=f"{kind}-w{weight}-m{samples}-s{seed}",
                    )
                )
    path = _out_path(opts, "sweep.csv")
    rows = sweep(bundle, net, items, U, labels, out_path=path)
    failed = sum(1 for r in rows if r["status"] != "ok")
    print(f"swept {len(rows)} grid points, {failed} failed")
    _announce(path)
    return 0


def cmd_bench(args):
    opts = _merge(
        args,
        _TRAIN_SPEC
        + [
            ("bundle", _REQUIRED),
            ("net", _REQUIRED),
            ("samples", None),
            ("workers_list", "1,2,4,8"),
            ("out", "."),
        ],
    )
    bundle, _, _ = _load_artifact(load_bundle, opts["bundle"], "bundle")
    if opts["samples"]:
        try:
            bundle = subsample_columns(bundle, opts["samples"], seed=opts["seed"])
        except ValueError as err:
            raise CliError("E_CONFIG", str(err))
    net = _load_artifact(load_net, opts["net"], "net")
    counts = _int_list(opts["workers_list"])
    if not counts:
        raise CliError("E_CONFIG", "workers_list is empty")
    rows = []
    digests = set()
    base_seconds = None
    for workers in counts:
        config = _train_config(opts, _objective(opts), workers=workers)
        started = time.perf_counter()
        try:
            trained = train(
                bundle, config, activation=net.activation, baseline_nnz=net_nnz(net)
            )
        except (TrainError, RowSolverError) as err:
            raise CliError("E_TRAIN", str(err))
        elapsed = time.perf_counter() - started
        digest = hashlib.sha256(model_to_bytes(trained.model)).hexdigest()
        digests.add(digest)
        if base_seconds is None:
            base_seconds = elapsed
        speedup = base_seconds / elapsed if elapsed > 0 else float("inf")
        rows.append((workers, elapsed, speedup, digest))
        print(f"workers {workers}: {elapsed:.2f}s speedup {speedup:.2f} model {digest[:12]}")
    if len(digests) != 1:
        raise CliError("E_TRAIN", "models differ across worker counts")
    print("models identical across worker counts")
    path = _out_path(opts, "bench.csv")
    with open(path, "w") as fh:
        fh.write("workers,seconds,speedup,model_sha256\n")
        for workers, elapsed, speedup, digest in rows:
            fh.write(f"{workers},{elapsed:.4f},{speedup:.4f},{digest}\n")
    _announce(path)
    return 0


def _add_data_flags(sub):
    sub.add_argument("--data-dir", dest="data_dir")
    sub.add_argument("--format", choices=["idx", "csv"])
    sub.add_argument("--csv-train", dest="csv_train")
    sub.add_argument("--csv-test", dest="csv_test")


def _add_train_flags(sub):
    sub.add_argument("--objective", choices=["perspective", "l1", "none"])
    sub.add_argument("--alpha", type=float)
    sub.add_argument("--beta", type=float)
    sub.add_argument("--lambda1", type=float)
    sub.add_argument("--lambda2", type=float)
    sub.add_argument("--kappa", type=float)
    sub.add_argument("--mode", choices=["relaxed", "exact"])
    sub.add_argument("--workers", type=int)
    sub.add_argument("--max-iter", dest="max_iter", type=int)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="simnet",
        description="Train sparse, robust implicit models from layered nets.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    sub = subs.add_parser("train-baseline", help="train the layered baseline")
    _add_data_flags(sub)
    sub.add_argument("--widths")
    sub.add_argument("--activation", choices=["relu", "leaky_relu", "identity"])
    sub.add_argument("--slope", type=float)
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--batch-size", dest="batch_size", type=int)
    sub.add_argument("--learning-rate", dest="learning_rate", type=float)
    sub.add_argument("--no-bias", dest="bias", action="store_false", default=None)
    sub.add_argument("--limit", type=int)
    sub.set_defaults(func=cmd_train_baseline)

    sub = subs.add_parser("extract", help="collect states into a bundle")
    _add_data_flags(sub)
    sub.add_argument("--net")
    sub.add_argument("--samples", type=int)
    sub.add_argument("--kappa", type=float)
    sub.add_argument("--rescale", choices=["model", "layers", "none"])
    sub.add_argument("--gamma", type=float)
    sub.set_defaults(func=cmd_extract)

    sub = subs.add_parser("sim-train", help="fit the implicit model rows")
    _add_train_flags(sub)
    sub.add_argument("--bundle")
    sub.add_argument("--net")
    sub.add_argument("--samples", type=int)
    sub.set_defaults(func=cmd_sim_train)

    sub = subs.add_parser("eval", help="clean and adversarial accuracy")
    _add_data_flags(sub)
    sub.add_argument("--model")
    sub.add_argument("--net")
    sub.add_argument("--epsilon", type=float)
    sub.add_argument("--mask-fraction", dest="mask_fraction", type=float)
    sub.add_argument("--batch-size", dest="batch_size", type=int)
    sub.add_argument("--limit", type=int)
    sub.set_defaults(func=cmd_eval)

    sub = subs.add_parser("attack", help="eval focused on one attack budget")
    _add_data_flags(sub)
    sub.add_argument("--model")
    sub.add_argument("--net")
    sub.add_argument("--epsilon", type=float)
    sub.add_argument("--mask-fraction", dest="mask_fraction", type=float)
    sub.add_argument("--batch-size", dest="batch_size", type=int)
    sub.add_argument("--limit", type=int)
    sub.set_defaults(func=cmd_attack)

    sub = subs.add_parser("sweep", help="grid of trainings and evaluations")
    _add_data_flags(sub)
    _add_train_flags(sub)
    sub.add_argument("--bundle")
    sub.add_argument("--net")
    sub.add_argument("--weights")
    sub.add_argument("--samples-list", dest="samples_list")
    sub.add_argument("--seeds")
    sub.add_argument("--epsilon", type=float)
    sub.add_argument("--mask-fraction", dest="mask_fraction", type=float)
    sub.add_argument("--limit", type=int)
    sub.set_defaults(func=cmd_sweep)

    sub = subs.add_parser("bench", help="worker scaling and determinism")
    _add_train_flags(sub)
    sub.add_argument("--bundle")
    sub.add_argument("--net")
    sub.add_argument("--samples", type=int)
    sub.add_argument("--workers-list", dest="workers_list")
    sub.set_defaults(func=cmd_bench)

    for sub_parser in subs.choices.values():
        sub_parser.add_argument("--config")
        sub_parser.add_argument("--seed", type=int)
        sub_parser.add_argument("--out")

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as err:
        print(f"SIM-ERR {err.code}: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - the CLI contract is one error line
        print(f"SIM-ERR E_INTERNAL: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
