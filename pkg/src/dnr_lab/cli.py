"""Command-line driver: ``dnr-lab <subcommand> [--config FILE] [--section.key=value ...]``.

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
4 numerical failure, 5 theory-verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import config as cf
from . import datagen as dg
from . import noise as nz
from . import objectives as ob
from . import oracle
from . import pipeline as pl
from . import plotting
from . import reranker as rr
from .metrics import noise_diagnostics

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC, EXIT_THEORY = 0, 2, 3, 4, 5

DATA_FLAGS = {
    "users": "data.users",
    "items": "data.items",
    "latent_dim": "data.latent_dim",
    "min_interactions": "data.min_interactions",
    "split_ratio": "data.split_ratio",
    "n": "data.n",
    "k": "data.k",
}

SWEEP_AXES = {"lambda_c": "dnr.lambda_c", "lambda_m": "dnr.lambda_m", "lambda_e": "dnr.lambda_e"}


def _say(msg: str) -> None:
    print(msg, flush=True)


# -- argument handling --------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dnr-lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment JSON file")
        sp.add_argument("--out", help="output directory (overrides output.dir)")
        sp.add_argument("--seed", type=int, help="seed for data, retriever and training")
        for flag in DATA_FLAGS:
            kind = float if flag == "split_ratio" else int
            sp.add_argument("--" + flag.replace("_", "-"), dest=flag, type=kind)
        return sp

    common(sub.add_parser("gen-data", help="generate or ingest data, fit the retriever, build requests"))
    common(sub.add_parser("train-retriever", help="refit the retriever on the stored log"))
    sp = common(sub.add_parser("train-baseline", help="train a direct-loss reranker"))
    sp.add_argument("--integration", choices=["none", "concat", "add", "weight"])
    common(sub.add_parser("train-dnr", help="train the denoising reranker and noise generator"))
    sp = common(sub.add_parser("eval", help="evaluate a reranker checkpoint"))
    sp.add_argument("--checkpoint", help="reranker checkpoint (.dnrw); omit with --identity")
    sp.add_argument("--identity", action="store_true", help="rank by the retriever scores")
    sp.add_argument("--dataset", help="samples JSON-lines (default: <out>/data/samples.jsonl)")
    sp.add_argument("--split", choices=["val", "train", "all"], default="val")
    sp.add_argument("--dump-per-sample", action="store_true")
    sp.add_argument("--report", help="directory for the report (default: next to the checkpoint)")
    sp = common(sub.add_parser("sweep", help="sweep one DNR hyperparameter over seeds"))
    sp.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.add_argument("--seeds", default="0", help="comma-separated seeds")
    sp = sub.add_parser("verify-theory", help="check the likelihood decompositions exactly")
    sp.add_argument("--worlds", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="directory for theory.csv / theory.json")
    sp.add_argument("--inject-unnormalized-q", action="store_true", help=argparse.SUPPRESS)
    sp = common(sub.add_parser("noise-diag", help="compare generator and heuristic noise with the true noise"))
    sp.add_argument("--run", help="DNR run directory (default: <out>/dnr)")
    return p


def _split_overrides(extra: list[str]) -> dict:
    """``--section.key=value`` or ``--section.key value`` pairs."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise cf.ConfigError(tok, "unrecognized argument")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise cf.ConfigError(key, "missing value")
            i += 1
            val = extra[i]
        out[key] = cf.parse_value(val)
        i += 1
    return out


def _resolve(args, extra: list[str]) -> cf.ExperimentConfig:
    overrides = _split_overrides(extra)
    for flag, dotted in DATA_FLAGS.items():
        if getattr(args, flag, None) is not None:
            overrides[dotted] = getattr(args, flag)
    if getattr(args, "seed", None) is not None:
        overrides["data.seed"] = args.seed
        overrides["dnr.seed"] = args.seed
    if getattr(args, "out", None):
        overrides["output.dir"] = args.out
    if getattr(args, "integration", None):
        overrides["reranker.integration"] = args.integration
    return cf.resolve(args.config, overrides)


# -- subcommands --------------------------------------------------------------


def cmd_gen_data(cfg: cf.ExperimentConfig) -> int:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    world = pl.build_world(cfg)
    pl.write_world(world, out)
    (out / "config.json").write_text(cfg.dumps(), encoding="utf-8")
    _say(world.stats().table())
    _say(f"retriever AUC {world.retriever_auc:.4f}")
    return EXIT_OK


def cmd_train_retriever(cfg: cf.ExperimentConfig) -> int:
    out = cfg.out_dir
    log = pl.load_log(out)
    truth = None
    if (out / "data" / "truth.json").exists():
        truth = dg.SyntheticTruth.from_json(json.loads((out / "data" / "truth.json").read_text(encoding="utf-8")))
    world = pl.rebuild_world(cfg, log, truth)
    pl.write_retriever(world, out)
    dg.write_jsonl(world.samples, out / "data" / "samples.jsonl")
    _say(f"retriever AUC {world.retriever_auc:.4f}")
    return EXIT_OK


def _save_run(run_dir: Path, cfg, result: ob.RunResult, valid, title: str, extra: dict | None = None) -> dict:
    run_dir.mkdir(parents=True, exist_ok=True)
    result.reranker.save(run_dir / "reranker.dnrw")
    result.history.write_csv(run_dir / "history.csv")
    report = pl.evaluate(result.reranker, valid, cfg.data.k)
    report.write_json(run_dir / "metrics.json")
    summary = {"validation": report.summary(), "reranker_digest": result.reranker.params.digest()}
    if extra:
        summary.update(extra)
    result.history.write_summary(run_dir / "summary.json", summary)
    (run_dir / "config.json").write_text(cfg.dumps(), encoding="utf-8")
    plotting.plot_history(result.history, run_dir / "history.png", title)
    return report.summary()


def cmd_train_baseline(cfg: cf.ExperimentConfig) -> int:
    out = cfg.out_dir
    samples = pl.load_samples(out)
    retriever = pl.load_retriever(out)
    train, valid = dg.split_samples(samples, cfg.data.val_fraction, cfg.data.seed)
    result = pl.run_baseline(cfg, train, valid, retriever.n_items)
    run_dir = out / f"baseline-{cfg.reranker.integration}"
    summary = _save_run(run_dir, cfg, result, valid, f"baseline ({cfg.reranker.integration})")
    _say(f"validation NDCG@{cfg.data.k} {summary['ndcg_k']:.4f}  ->  {run_dir}")
    return EXIT_OK


def _save_generator(run_dir: Path, gen: nz.GeneratorModel, cfg, init_digest: str) -> None:
    gen.params.save(run_dir / "generator.dnrw")
    meta = {"d_noise": gen.d_noise, "hidden": cfg.dnr.gen_hidden, "init_digest": init_digest, "digest": gen.params.digest()}
    pl.write_json(run_dir / "generator.json", meta)


def load_generator(run_dir: Path, retriever) -> nz.GeneratorModel:
    meta = json.loads(pl.require(run_dir / "generator.json").read_text(encoding="utf-8"))
    params = ad.ParamStore.load(pl.require(run_dir / "generator.dnrw"))
    return nz.GeneratorModel(params, retriever.user_emb.copy(), retriever.item_emb.copy(), int(meta["d_noise"]))


def cmd_train_dnr(cfg: cf.ExperimentConfig) -> int:
    out = cfg.out_dir
    samples = pl.load_samples(out)
    retriever = pl.load_retriever(out)
    before = retriever.params.digest()
    train, valid = dg.split_samples(samples, cfg.data.val_fraction, cfg.data.seed)
    result = pl.run_dnr(cfg, train, valid, retriever)
    if retriever.params.digest() != before:
        raise RuntimeError("retriever parameters changed during training")
    run_dir = out / "dnr"
    extra = {
        "generator_digest": result.generator.params.digest(),
        "generator_init_digest": result.generator_init_digest,
        "generator_updated": result.generator.params.digest() != result.generator_init_digest,
    }
    summary = _save_run(run_dir, cfg, result, valid, "DNR", extra)
    _save_generator(run_dir, result.generator, cfg, result.generator_init_digest)
    _say(f"validation NDCG@{cfg.data.k} {summary['ndcg_k']:.4f}  ->  {run_dir}")
    return EXIT_OK


def cmd_eval(cfg: cf.ExperimentConfig, args) -> int:
    out = cfg.out_dir
    dataset = Path(args.dataset) if args.dataset else out / "data" / "samples.jsonl"
    samples = dg.read_jsonl(pl.require(dataset))
    if args.split != "all":
        train, valid = dg.split_samples(samples, cfg.data.val_fraction, cfg.data.seed)
        samples = valid if args.split == "val" else train
    if not samples:
        raise cf.ConfigError("eval.split", "selected split is empty")
    if cfg.data.k > len(samples[0].candidates):
        raise cf.ConfigError("data.k", f"K={cfg.data.k} exceeds list length {len(samples[0].candidates)}")
    if args.identity:
        model = None
        report_dir = Path(args.report) if args.report else out / "eval-identity"
    else:
        if not args.checkpoint:
            raise cf.ConfigError("eval.checkpoint", "give --checkpoint or --identity")
        ckpt = pl.require(args.checkpoint)
        pl.require(Path(ckpt).with_suffix(".json"))
        model = rr.RerankerModel.load(ckpt)
        if any(int(s.candidates.max()) >= model.n_items for s in samples):
            raise cf.ConfigError("eval.dataset", "dataset item ids exceed the checkpoint's item table")
        report_dir = Path(args.report) if args.report else Path(ckpt).parent
    report_dir.mkdir(parents=True, exist_ok=True)
    report = pl.evaluate(model, samples, cfg.data.k)
    report.write_json(report_dir / f"eval-{args.split}.json")
    if args.dump_per_sample:
        report.write_per_sample_csv(report_dir / f"eval-{args.split}-per-sample.csv", [s.user for s in samples])
    s = report.summary()
    _say(
        f"K={s['k']} HR={s['hr_k']:.4f} NDCG={s['ndcg_k']:.4f} MAP={s['map_k']:.4f} "
        f"F1={s['f1_k']:.4f} AUC={s['auc']:.4f} over {s['samples']} requests"
    )
    return EXIT_OK


def _threads() -> int:
    raw = os.environ.get("DNR_LAB_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return max(1, os.cpu_count() or 1)


def _sweep_world(raw_cfg: dict, seed: int, world_dir: str) -> str:
    cfg = cf.from_dict(cf.apply_overrides(raw_cfg, {"data.seed": seed, "dnr.seed": seed, "output.dir": world_dir}))
    pl.write_world(pl.build_world(cfg), Path(world_dir))
    return world_dir


def _sweep_cell(raw_cfg: dict, dotted: str, value, seed: int, world_dir: str, cell_dir: str) -> dict:
    cfg = cf.from_dict(
        cf.apply_overrides(raw_cfg, {dotted: value, "data.seed": seed, "dnr.seed": seed, "output.dir": cell_dir})
    )
    wd = Path(world_dir)
    samples = pl.load_samples(wd)
    retriever = pl.load_retriever(wd)
    train, valid = dg.split_samples(samples, cfg.data.val_fraction, cfg.data.seed)
    result = pl.run_dnr(cfg, train, valid, retriever)
    summary = _save_run(Path(cell_dir), cfg, result, valid, f"{dotted}={value} seed={seed}")
    return summary


def _parse_list(text: str, kind, name: str) -> list:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise cf.ConfigError(name, "empty list")
    try:
        return [kind(t) for t in items]
    except ValueError:
        raise cf.ConfigError(name, f"cannot parse {text!r}") from None


def cmd_sweep(cfg: cf.ExperimentConfig, args) -> int:
    dotted = SWEEP_AXES[args.axis]
    kind = int if args.axis == "lambda_e" else float
    values = _parse_list(args.values, kind, "sweep.values")
    seeds = _parse_list(args.seeds, int, "sweep.seeds")
    for v in values:
        if args.axis == "lambda_e":
            if not 0 <= v <= cfg.dnr.epochs:
                raise cf.ConfigError("sweep.values", f"lambda_e={v} outside [0, {cfg.dnr.epochs}]")
        elif not 0.1 <= v <= 1.0:
            raise cf.ConfigError("sweep.values", f"{args.axis}={v} outside [0.1, 1.0]")
    raw = cfg.to_json()
    for v in values:  # validate every cell before any compute
        cf.from_dict(cf.apply_overrides(raw, {dotted: v}))
    root = cfg.out_dir / f"sweep-{args.axis}"
    root.mkdir(parents=True, exist_ok=True)
    worlds = {s: str(root / f"world-seed{s}") for s in seeds}
    cells = [(v, s, str(root / f"{args.axis}={v}" / f"seed{s}")) for v in values for s in seeds]
    workers = min(_threads(), len(cells))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as ex:
            list(ex.map(_sweep_world, [raw] * len(seeds), seeds, [worlds[s] for s in seeds]))
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futures = [ex.submit(_sweep_cell, raw, dotted, v, s, worlds[s], d) for v, s, d in cells]
            results = [f.result() for f in futures]
    else:
        for s in seeds:
            _sweep_world(raw, s, worlds[s])
        results = [_sweep_cell(raw, dotted, v, s, worlds[s], d) for v, s, d in cells]

    cols = ["hr_k", "ndcg_k", "map_k", "f1_k", "auc"]
    with open(root / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis", "value", "seed"] + cols)
        for (v, s, _), r in zip(cells, results):
            w.writerow([args.axis, v, s] + [repr(float(r[c])) for c in cols])
    means, stds = [], []
    with open(root / "sweep_summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis", "value", "seeds", "mean_ndcg_k", "std_ndcg_k"])
        for v in values:
            vals = np.array([r["ndcg_k"] for (cv, _, _), r in zip(cells, results) if cv == v])
            means.append(float(vals.mean()))
            stds.append(float(vals.std()))
            w.writerow([args.axis, v, vals.size, repr(means[-1]), repr(stds[-1])])
    plotting.plot_sweep(args.axis, values, means, stds, root / "sweep.png", f"NDCG@{cfg.data.k}")
    for v, m in zip(values, means):
        _say(f"{args.axis}={v}: mean NDCG@{cfg.data.k} {m:.4f}")
    return EXIT_OK


def _unnormalize_q(model: oracle.TableModel, rng) -> oracle.TableModel:
    return oracle.TableModel(model.q * 1.5, model.p_phi)


def cmd_verify_theory(args) -> int:
    report = oracle.verify_theory(args.worlds, args.seed, _unnormalize_q if args.inject_unnormalized_q else None)
    by_world: dict[int, list] = {}
    for row in report.rows:
        by_world.setdefault(row.world, []).append(row)
    for w, rows in by_world.items():
        _say(
            f"world {w:3d} n={rows[0].n} grid={rows[0].grid_size} "
            f"direct {max(r.direct_residual for r in rows):.2e} synth {max(r.synth_residual for r in rows):.2e} "
            f"max delta_x {max(r.delta_x for r in rows):.3e}"
        )
    s = report.summary()
    _say(f"max direct residual {s['max_direct_residual']:.3e}")
    _say(f"max synth residual {s['max_synth_residual']:.3e}")
    _say(f"max delta_x {s['max_delta_x']:.3e}; at Bayes posterior {s['max_abs_delta_x_at_posterior']:.3e}")
    _say(f"max table normalization error {s['max_normalization_error']:.3e}")
    _say("PASS" if report.passed else "FAIL")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(out / "theory.csv")
        pl.write_json(out / "theory.json", s)
    return EXIT_OK if report.passed else EXIT_THEORY


def cmd_noise_diag(cfg: cf.ExperimentConfig, args) -> int:
    out = cfg.out_dir
    run_dir = Path(args.run) if args.run else out / "dnr"
    samples = pl.load_samples(out)
    retriever = pl.load_retriever(out)
    gen = load_generator(run_dir, retriever)
    train, _ = dg.split_samples(samples, cfg.data.val_fraction, cfg.data.seed)
    reference = pl.synthetic_true_noise(train, cfg.dnr.lambda_c)
    rng = np.random.default_rng(cfg.dnr.seed)
    h = cfg.dnr.heuristic
    series = {
        "model": ob.sample_generator_noise(gen, train, cfg.dnr.seed),
        "gaussian": nz.sample_gaussian(reference.size, h.mu, h.sigma, rng),
        "beta": nz.sample_beta(reference.size, h.alpha, h.beta, rng),
        "beta(2,5)": nz.sample_beta(reference.size, 2.0, 5.0, rng),
    }
    diags = {name: noise_diagnostics(v, reference, seed=cfg.dnr.seed) for name, v in series.items()}
    edges = next(iter(diags.values())).edges
    with open(run_dir / "noise_hist.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "true"] + list(series))
        ref_hist = next(iter(diags.values())).reference_hist
        for b in range(edges.size - 1):
            w.writerow(
                [repr(float(edges[b])), repr(float(edges[b + 1])), repr(float(ref_hist[b]))]
                + [repr(float(diags[n].generated_hist[b])) for n in series]
            )
    summary = {name: {"kl": d.kl, "mmd2": d.mmd2} for name, d in diags.items()}
    pl.write_json(run_dir / "noise_diag.json", {"lambda_c": cfg.dnr.lambda_c, "vs_true_noise": summary})
    plotting.plot_noise(edges, {"true": ref_hist, **{n: d.generated_hist for n, d in diags.items()}}, run_dir / "noise_hist.png")
    for name, d in diags.items():
        _say(f"{name:>10}: KL {d.kl:.4f}  MMD^2 {d.mmd2:.5f}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    args, extra = parser.parse_known_args(argv)
    try:
        if args.command == "verify-theory":
            if extra:
                raise cf.ConfigError(extra[0], "unrecognized argument")
            return cmd_verify_theory(args)
        cfg = _resolve(args, extra)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train-retriever":
            return cmd_train_retriever(cfg)
        if args.command == "train-baseline":
            return cmd_train_baseline(cfg)
        if args.command == "train-dnr":
            return cmd_train_dnr(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args)
        if args.command == "sweep":
            return cmd_sweep(cfg, args)
        if args.command == "noise-diag":
            return cmd_noise_diag(cfg, args)
    except cf.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pl.MissingArtifact as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_MISSING
    except (ad.NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (dg.DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    parser.error(f"unknown command {args.command}")
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
