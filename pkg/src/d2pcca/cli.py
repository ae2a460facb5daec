"""Command-line interface.

    d2pcca simulate    --out DIR                      synthetic panel + manifest + truth
    d2pcca train       --data TABLE --out DIR         train the configured variant
    d2pcca em-baseline --data TABLE --out DIR         linear model fitted by EM
    d2pcca eval        CKPT [CKPT ...] --data TABLE   ELBO and RMSE per checkpoint
    d2pcca reconstruct CKPT --data TABLE --window K   reconstruction bands

Common flags: ``--config``, ``--seed``, ``--out``, ``--variant``.  The worker
count for training comes from ``D2PCCA_WORKERS``.  Every command writes
``config.yaml`` (the full effective configuration) to its output directory
before doing any work.

Exit codes: 0 success, 2 configuration, 3 data, 4 numerical, 5 I/O.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from d2pcca import checkpoint as ck
from d2pcca import config as cf
from d2pcca import data, lds, synthetic
from d2pcca import training as tr
from d2pcca.errors import CheckpointError, ConfigError, DataError, NumericalError, ShapeError
from d2pcca.flows import attach_flow
from d2pcca.model import D2pccaModel, LatentLayout, NetWidths

log = logging.getLogger("d2pcca")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4, 5


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="random seed (unsigned 64-bit)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--variant", choices=cf.VARIANTS, help="model variant")
    common.add_argument("-v", "--verbose", action="store_true")

    dataset = argparse.ArgumentParser(add_help=False)
    dataset.add_argument("--data", help="panel table (CSV with a 'date' column)")
    dataset.add_argument("--manifest", help="set manifest (default: manifest.yaml next to the table)")

    p = argparse.ArgumentParser(
        prog="d2pcca",
        description="Deep dynamic multiset PCCA: simulate panels, fit the linear baseline, train and evaluate deep variants.",
        epilog="Exit codes: 0 success, 2 configuration, 3 data, 4 numerical, 5 I/O.",
    )
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write a synthetic panel")
    t = sub.add_parser("train", parents=[common, dataset], help="train a model")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--epochs", type=int, help="override the number of epochs")
    sub.add_parser("em-baseline", parents=[common, dataset], help="fit the linear model by EM")
    e = sub.add_parser("eval", parents=[common, dataset], help="evaluate checkpoints on the test windows")
    e.add_argument("checkpoints", nargs="+")
    e.add_argument("--best", action="store_true", help="use best-validation weights when stored")
    r = sub.add_parser("reconstruct", parents=[common, dataset], help="export reconstruction bands")
    r.add_argument("checkpoint")
    r.add_argument("--window", type=int, default=0, help="test window index")
    r.add_argument("--best", action="store_true", help="use best-validation weights when stored")
    return p


def resolve_config(args) -> cf.RunConfig:
    if args.config:
        cfg = cf.load_config(args.config, args.variant)
    else:
        cfg = cf.from_dict({}, args.variant)
    raw = cf.to_dict(cfg)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out:
        raw["out"] = args.out
    if getattr(args, "data", None):
        raw["data"]["table"] = args.data
    if getattr(args, "manifest", None):
        raw["data"]["manifest"] = args.manifest
    if getattr(args, "epochs", None) is not None:
        raw["epochs"] = args.epochs
    return cf.from_dict(raw, args.variant)


def _setup_logging(out: Path, verbose: bool) -> None:
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    stream = logging.StreamHandler(sys.stderr)
    stream.setFormatter(fmt)
    handlers = [stream]
    out.mkdir(parents=True, exist_ok=True)
    fileh = logging.FileHandler(out / "run.log", mode="a")
    fileh.setFormatter(fmt)
    handlers.append(fileh)
    for h in handlers:
        root.addHandler(h)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def echo_config(cfg: cf.RunConfig, out: Path) -> None:
    cf.dump_config(cfg, out / "config.yaml")
    for line in cf.yaml.safe_dump(cf.to_dict(cfg), sort_keys=False).splitlines():
        log.info("config | %s", line)


def load_dataset(cfg: cf.RunConfig):
    if cfg.data.table is None:
        raise ConfigError("no dataset: pass --data TABLE or set data.table in the config")
    ds = data.load_panel(cfg.data.table, cfg.data.manifest_path())
    train_w, test_w = data.make_windows(ds, cfg.data.window, cfg.data.step, cfg.data.split)
    log.info(
        "dataset %s: %d rows, %d sets, p=%d; %d train / %d test windows (T=%d, step %d)",
        cfg.data.table, len(ds.values), ds.n_sets, ds.values.shape[1], len(train_w), len(test_w),
        cfg.data.window, cfg.data.step,
    )
    return ds, train_w, test_w


def layout_for(cfg: cf.RunConfig, ds: data.PanelDataset) -> LatentLayout:
    return LatentLayout(cfg.layout.shared_dim, (cfg.layout.set_dim,) * ds.n_sets, ds.obs_dims, ds.set_names)


def build_model(cfg: cf.RunConfig, layout: LatentLayout) -> D2pccaModel:
    rng = np.random.default_rng(cfg.seed)
    widths = NetWidths(cfg.nets.transition_hidden, cfg.nets.emission_hidden, cfg.nets.encoder_hidden)
    model = D2pccaModel(layout, rng, transition_variant=cfg.nets.transition, widths=widths)
    if cfg.flow is not None:
        attach_flow(model, cfg.flow.layers, cfg.flow.hidden, rng=np.random.default_rng([cfg.seed, 1]))
    return model


def train_config(cfg: cf.RunConfig) -> tr.TrainConfig:
    return tr.TrainConfig(
        epochs=cfg.epochs, batch_size=cfg.batch_size, optimizer=cfg.optimizer, anneal=cfg.anneal,
        kl_estimator=cfg.kl_estimator, sample_count=cfg.sample_count, val_fraction=cfg.val_fraction,
        seed=cfg.seed,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: cf.RunConfig, out: Path) -> None:
    g = cfg.generator
    rng = np.random.default_rng(cfg.seed)
    if g.kind == "nonlinear":
        panel = synthetic.nonlinear_panel(
            g.rows, rng, g.n_sets, g.obs_per_set, cfg.layout.set_dim, g.noise_scale, g.hetero,
            g.shared_mean, g.persistence,
        )
    else:
        layout = LatentLayout.uniform(g.n_sets, g.obs_per_set, cfg.layout.shared_dim, cfg.layout.set_dim)
        layout = LatentLayout(layout.shared_dim, layout.set_dims, layout.obs_dims, synthetic.set_names(g.n_sets))
        panel, _ = synthetic.linear_panel(g.rows, layout, rng, g.linear_noise)
    lay = panel.layout
    names = lay.set_names or synthetic.set_names(lay.n_sets)
    cols = tuple(tuple(f"{n}_{k + 1}" for k in range(lay.obs_dims[j])) for j, n in enumerate(names))
    ds = data.PanelDataset(data.daily_dates(g.rows), panel.values, tuple(names), cols, g.split)
    data.save_panel(ds, out / "panel.csv", out / "manifest.yaml")
    truth = {"generator": cf.to_dict(cfg)["generator"], "seed": cfg.seed, "layout": lay.to_dict(), **panel.truth}
    (out / "truth.json").write_text(json.dumps(truth, indent=1))
    np.save(out / "latents.npy", panel.latents)
    log.info("wrote %s (%d rows, p=%d) and manifest.yaml, truth.json", out / "panel.csv", g.rows, lay.obs_total)


def cmd_em_baseline(cfg: cf.RunConfig, out: Path) -> data.Metrics:
    ds, train_w, test_w = load_dataset(cfg)
    layout = layout_for(cfg, ds)
    log.info("fitting the linear model by EM (max %d iterations)", cfg.em.max_iters)
    params, trace = lds.em_fit(train_w.sequences, layout.chain_dims, layout.obs_dims, cfg.em.max_iters, cfg.em.tol)
    log.info("EM: %d iterations, train log-likelihood %.4f", len(trace) - 1, trace[-1])
    ckpt = ck.linear_checkpoint(params, "dpcca-em", cfg.seed, ds.set_names, {"em_trace": trace})
    ck.write(out / "model.ckpt", ckpt)
    metrics = data.evaluate_linear(params, test_w, "dpcca-em")
    data.write_metrics(out / "metrics.csv", [metrics])
    log.info("test log-likelihood per step %.4f, RMSE %.4f", metrics.elbo_per_step, metrics.rmse)
    return metrics


def cmd_train(cfg: cf.RunConfig, out: Path, resume: str | None = None):
    if cfg.variant == "dpcca-em":
        return cmd_em_baseline(cfg, out)
    ds, train_w, test_w = load_dataset(cfg)
    layout = layout_for(cfg, ds)
    state = None
    if resume:
        old = ck.read(resume)
        if old.variant != cfg.variant:
            raise ConfigError(f"checkpoint variant {old.variant} differs from configured {cfg.variant}")
        model = ck.restore_model(old)
        if model.layout.to_dict() != layout.to_dict():
            raise DataError("checkpoint latent layout does not match the dataset")
        state = ck.restore_state(old, model)
        log.info("resuming from %s at epoch %d", resume, state.epoch)
    else:
        model = build_model(cfg, layout)
    tcfg = train_config(cfg)
    log.info("training %s with %d parameters", cfg.variant, sum(p.data.size for p in model.parameters()))

    def on_epoch(record, st):
        ck.write(out / "last.ckpt", ck.model_checkpoint(model, cfg.variant, cfg.seed, st))
        tr.write_trace(out / "trace.csv", st.trace)

    result = tr.train(model, train_w.sequences, tcfg, state, on_epoch)
    tr.write_trace(out / "trace.csv", result.trace)
    ck.write(out / "model.ckpt", ck.model_checkpoint(model, cfg.variant, cfg.seed, result.state))
    metrics = data.evaluate(model, test_w, cfg.variant, np.random.default_rng([cfg.seed, 2]), kl=cfg.kl_estimator)
    data.write_metrics(out / "metrics.csv", [metrics])
    log.info("final test ELBO per step %.4f, RMSE %.4f", metrics.elbo_per_step, metrics.rmse)
    return result


def _open_model(path: str, best: bool):
    ckpt = ck.read(path)
    if ckpt.kind == "dpcca":
        return ckpt, ck.restore_linear(ckpt)
    which = "best" if best and any(k.startswith("best.") for k in ckpt.arrays) else "param"
    return ckpt, ck.restore_model(ckpt, which)


def _check_layout(model_layout: dict, layout: LatentLayout, path: str) -> None:
    if tuple(model_layout["obs_dims"]) != layout.obs_dims:
        raise DataError(
            f"{path}: checkpoint expects sets of sizes {tuple(model_layout['obs_dims'])}, "
            f"dataset has {layout.obs_dims}"
        )


def cmd_eval(cfg: cf.RunConfig, out: Path, paths: list[str], best: bool = False) -> list[data.Metrics]:
    ds, _, test_w = load_dataset(cfg)
    layout = layout_for(cfg, ds)
    rows = []
    for path in paths:
        ckpt, model = _open_model(path, best)
        _check_layout(ckpt.header["layout"], layout, path)
        if ckpt.kind == "dpcca":
            m = data.evaluate_linear(model, test_w, ckpt.variant)
        else:
            m = data.evaluate(model, test_w, ckpt.variant, np.random.default_rng([cfg.seed, 2]), kl=cfg.kl_estimator)
        log.info("%s (%s): ELBO per step %.4f, RMSE %.4f", path, m.variant, m.elbo_per_step, m.rmse)
        rows.append(m)
    data.write_metrics(out / "metrics.csv", rows)
    return rows


def cmd_reconstruct(cfg: cf.RunConfig, out: Path, path: str, window: int, best: bool = False) -> Path:
    ds, _, test_w = load_dataset(cfg)
    if not 0 <= window < len(test_w):
        raise DataError(f"window index {window} out of range: the test split has {len(test_w)} windows")
    ckpt, model = _open_model(path, best)
    if ckpt.kind != "d2pcca":
        raise ConfigError("reconstruct needs a deep model checkpoint")
    _check_layout(ckpt.header["layout"], layout_for(cfg, ds), path)
    target = out / f"bands_window{window}.csv"
    mode = data.export_bands(
        model, test_w.sequences[window], target, ds.columns, ds.column_sets(), np.random.default_rng([cfg.seed, 3])
    )
    if mode == "sampled":
        log.info("latent mode: sampled latents (flow posterior has no analytic mean)")
    else:
        log.info("latent mode: posterior-mean latents")
    log.info("wrote %s", target)
    return target


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = resolve_config(args)
    out = Path(cfg.out)
    _setup_logging(out, args.verbose)
    echo_config(cfg, out)
    if args.command == "simulate":
        cmd_simulate(cfg, out)
    elif args.command == "train":
        cmd_train(cfg, out, args.resume)
    elif args.command == "em-baseline":
        cmd_em_baseline(cfg, out)
    elif args.command == "eval":
        cmd_eval(cfg, out, args.checkpoints, args.best)
    elif args.command == "reconstruct":
        cmd_reconstruct(cfg, out, args.checkpoint, args.window, args.best)
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"d2pcca: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError) as exc:
        print(f"d2pcca: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"d2pcca: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, CheckpointError) as exc:
        print(f"d2pcca: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
