"""Command-line entry point ``lab``.

Every subcommand writes into ``<out>/<experiment>/<subcommand>/`` the
resolved configuration, its artifacts and a ``manifest.json`` listing
seeds and SHA-256 hashes of everything it wrote.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .baselines import (build_pseudo_sets, compute_param_statistics, ga_unlearn,
                        sa_unlearn, salun_unlearn, vdu_unlearn)
from .config import ConfigError, dump_config, parse_config, sweep_variants
from .cost import FeatureExtractor, ForgetAnchor
from .data import ACCESS_LOG
from .flowmap import OneStepGenerator, VelocityField, generate
from .metrics import EvalReport
from .nn import Mlp, load_checkpoint, save_checkpoint
from .oracle import random_instance, solve_uot_bruteforce, solve_uot_sinkhorn
from .pipeline import Evaluator, ForgetSetup, prepare_forget, pretrain_generator
from .plotting import emit_scatter_plot, emit_tradeoff_plot
from .unlearn import CSV_HEADER, RUN_COLUMNS, run_unlearn, write_run_csv

log = logging.getLogger("uotlab")

SUBCOMMANDS = ("pretrain", "unlearn", "baseline", "eval", "oracle-check", "sweep", "plot")


class PrerequisiteError(RuntimeError):
    def __init__(self, missing):
        self.missing = missing
        super().__init__("missing prerequisite artifacts:\n  " + "\n  ".join(missing))


# --- file helpers -------------------------------------------------------------

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _write_manifest(outdir, cfg, subcommand, seeds):
    artifacts = {}
    for root, _, files in sorted(os.walk(outdir)):
        for name in sorted(files):
            if name == "manifest.json":
                continue
            p = os.path.join(root, name)
            artifacts[os.path.relpath(p, outdir)] = _sha256(p)
    _write_json(os.path.join(outdir, "manifest.json"), {
        "experiment": cfg.experiment,
        "subcommand": subcommand,
        "code_version": __version__,
        "master_seed": cfg.seed,
        "seeds": seeds,
        "config_sha256": hashlib.sha256(dump_config(cfg).encode()).hexdigest(),
        "artifacts": dict(sorted(artifacts.items())),
    })


def _prepare_dir(cfg, out, *parts):
    d = os.path.join(out, cfg.experiment, *parts)
    os.makedirs(d, exist_ok=True)
    with open(os.path.join(d, "resolved.yaml"), "w") as fh:
        fh.write(dump_config(cfg))
    return d


def _save_gen(path, gen, seed, step, extra=None):
    save_checkpoint(path, gen.spec, gen.params, seed=seed, step=step, extra=extra)


def _load_gen(path):
    spec, params, _ = load_checkpoint(path)
    return OneStepGenerator(Mlp(spec, params))


# --- pretrain artifacts -----------------------------------------------------------

PRETRAIN_FILES = ("generator.ckpt", "teacher.ckpt", "forget.json")


def load_pretrain(cfg, out):
    """``(g_pre, teacher, ForgetSetup)`` from the pretrain directory."""
    d = os.path.join(out, cfg.experiment, "pretrain")
    missing = [os.path.join(d, f) for f in PRETRAIN_FILES if not os.path.exists(os.path.join(d, f))]
    with_clf = os.path.exists(os.path.join(d, "forget.json"))
    if with_clf:
        with open(os.path.join(d, "forget.json")) as fh:
            meta = json.load(fh)
        if meta["feature_kind"] == "classifier" and not os.path.exists(os.path.join(d, "classifier.ckpt")):
            missing.append(os.path.join(d, "classifier.ckpt"))
    if missing:
        raise PrerequisiteError(missing)
    g_pre = _load_gen(os.path.join(d, "generator.ckpt"))
    tspec, tparams, _ = load_checkpoint(os.path.join(d, "teacher.ckpt"))
    teacher = VelocityField(Mlp(tspec, tparams))
    if meta["feature_kind"] == "classifier":
        cspec, cparams, _ = load_checkpoint(os.path.join(d, "classifier.ckpt"))
        extractor = FeatureExtractor("classifier", Mlp(cspec, cparams), accuracy=meta["accuracy"])
    else:
        extractor = FeatureExtractor("raw", dimension=g_pre.dimension)
    anchor = ForgetAnchor(np.array(meta["anchor"]), meta["anchor_count"])
    setup = ForgetSetup(extractor, anchor, meta["margin"], meta["forget_index"], meta["distance"])
    return g_pre, teacher, setup


def cmd_pretrain(cfg, out):
    d = _prepare_dir(cfg, out, "pretrain")
    pcfg = cfg.pretrain_config()
    gen, info = pretrain_generator(cfg.data, pcfg)
    _save_gen(os.path.join(d, "generator.ckpt"), gen, pcfg.seed, pcfg.distill_iters)
    field = info["field"]
    save_checkpoint(os.path.join(d, "teacher.ckpt"), field.mlp.spec, field.mlp.params,
                    seed=pcfg.seed, step=pcfg.cfm_iters)
    fcfg = cfg.feature_config()
    setup = prepare_forget(gen, cfg.data, cfg.forget_index, fcfg, cfg.forget.distance,
                           cfg.forget.n_anchor, cfg.forget.n_heldout, cfg.forget.calibration,
                           seed=cfg.sub_seed("forget"))
    ex = setup.extractor
    if ex.kind == "classifier":
        save_checkpoint(os.path.join(d, "classifier.ckpt"), ex.classifier.spec,
                        ex.classifier.params, seed=fcfg.seed, step=fcfg.iters)
    _write_json(os.path.join(d, "forget.json"), {
        "forget_index": cfg.forget_index, "feature_kind": ex.kind, "accuracy": ex.accuracy,
        "anchor": setup.anchor.mu_f, "anchor_count": setup.anchor.source_sample_count,
        "margin": setup.margin, "distance": setup.distance,
        "calibration": cfg.forget.calibration,
    })
    report = Evaluator(gen, cfg.data, cfg.forget_index, cfg.eval).pre_report
    _write_json(os.path.join(d, "pretrain.json"), {
        "spec": cfg.data.to_dict(), "spec_digest": cfg.data.digest(),
        "final_cfm_loss": float(np.mean(info["cfm_losses"][-100:])) if len(info["cfm_losses"]) else None,
        "cfm_loss_at_1k": (float(np.mean(info["cfm_losses"][950:1050]))
                           if len(info["cfm_losses"]) >= 1050 else None),
        "final_distill_loss": float(np.mean(info["losses"][-100:])) if len(info["losses"]) else None,
        "train_residual": info["train_residual"], "holdout_residual": info["holdout_residual"],
        "report": report.to_dict(),
    })
    _write_manifest(d, cfg, "pretrain", {"pretrain": pcfg.seed, "features": fcfg.seed,
                                         "forget": cfg.sub_seed("forget")})
    log.info("pretrain: oos %.4f, masses %s", report.oos_mass, report.mode_masses)
    return 0


# --- unlearning --------------------------------------------------------------------

def _unlearn_into(cfg, out, d):
    g_pre, _, setup = load_pretrain(cfg, out)
    ucfg = cfg.unlearn_config(setup.margin)
    setup = dataclasses.replace(setup, margin=ucfg.cost.margin)
    evaluator = Evaluator(g_pre, cfg.data, cfg.forget_index, cfg.eval)
    ckdir = os.path.join(d, "checkpoints")
    os.makedirs(ckdir, exist_ok=True)

    def checkpoint(state):
        _save_gen(os.path.join(ckdir, f"iter_{state.iteration:06d}.ckpt"), state.output_generator(),
                  ucfg.seed, state.iteration, {"pre_digest": state.pre_digest})

    n0 = len(ACCESS_LOG)
    gen, rows, state = run_unlearn(g_pre, setup.extractor, setup.anchor, ucfg,
                                   eval_fn=evaluator, callback=checkpoint)
    reads = ACCESS_LOG[n0:]
    write_run_csv(os.path.join(d, "run.csv"), rows)
    _save_gen(os.path.join(d, "generator.ckpt"), gen, ucfg.seed, state.iteration)
    report = evaluator.report(gen)
    _write_json(os.path.join(d, "report.json"), {
        "report": report.to_dict(), "pretrain_report": evaluator.pre_report.to_dict(),
        "margin": ucfg.cost.margin, "real_data_reads_during_training": reads,
    })
    return report, ucfg


def cmd_unlearn(cfg, out):
    load_pretrain(cfg, out)
    d = _prepare_dir(cfg, out, "unlearn")
    report, ucfg = _unlearn_into(cfg, out, d)
    _write_manifest(d, cfg, "unlearn", {"unlearn": ucfg.seed})
    log.info("unlearn: pul %.2f oos %.4f frechet_retain %.4f", report.pul_percent,
             report.oos_mass, report.frechet_retain)
    return 0


def cmd_baseline(cfg, out, method):
    g_pre, teacher, setup = load_pretrain(cfg, out)
    d = _prepare_dir(cfg, out, "baseline", method)
    bcfg = cfg.baseline_config(method)
    cost = setup.cost_config(margin=setup.margin * cfg.forget.margin_scale)
    sets = build_pseudo_sets(g_pre, teacher, setup.extractor, setup.anchor, cost,
                             bcfg.n_pseudo, cfg.sub_seed("pseudo-sets"), bcfg.teacher_steps)
    evaluator = Evaluator(g_pre, cfg.data, cfg.forget_index, cfg.eval)
    extra = {"forget_set_size": len(sets.forget_noise), "retain_set_size": len(sets.retain_noise)}
    if method == "ga":
        gen, rows = ga_unlearn(g_pre, sets, bcfg, evaluator)
    elif method == "vdu":
        stats = compute_param_statistics(g_pre, teacher, bcfg)
        extra["snapshots"] = stats.count
        gen, rows = vdu_unlearn(g_pre, stats, sets, bcfg, evaluator)
    elif method == "sa":
        gen, rows = sa_unlearn(g_pre, sets, bcfg, evaluator)
    else:
        gen, rows, mask = salun_unlearn(g_pre, sets, bcfg, evaluator)
        extra["mask_fraction"] = float(np.mean(mask.flat()))
    write_run_csv(os.path.join(d, "run.csv"), rows)
    _save_gen(os.path.join(d, "generator.ckpt"), gen, bcfg.seed, bcfg.iterations)
    _write_json(os.path.join(d, "report.json"), {"report": evaluator.report(gen).to_dict(), **extra})
    _write_manifest(d, cfg, f"baseline/{method}", {"baseline": bcfg.seed,
                                                   "pseudo_sets": cfg.sub_seed("pseudo-sets")})
    return 0


def cmd_eval(cfg, out, checkpoint=None):
    g_pre, _, _ = load_pretrain(cfg, out)
    if checkpoint is None:
        checkpoint = os.path.join(out, cfg.experiment, "unlearn", "generator.ckpt")
    if not os.path.exists(checkpoint):
        raise PrerequisiteError([checkpoint])
    gen = _load_gen(checkpoint)
    d = _prepare_dir(cfg, out, "eval")
    evaluator = Evaluator(g_pre, cfg.data, cfg.forget_index, cfg.eval)
    report = evaluator.report(gen)
    write_eval_csv(os.path.join(d, "eval.csv"), report)
    _write_json(os.path.join(d, "eval.json"), {"checkpoint": os.path.abspath(checkpoint),
                                                "checkpoint_sha256": _sha256(checkpoint),
                                                "report": report.to_dict()})
    _write_manifest(d, cfg, "eval", {"eval": cfg.eval.seed})
    return 0


def write_eval_csv(path, report: EvalReport):
    row = {"iter": "", "dual_loss": "", "gen_loss": "", "region_hit_rate": "", "clamp_count": "",
           **report.csv_fields()}
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        fh.write(",".join(RUN_COLUMNS) + "\n")
        fh.write(",".join("" if row[c] == "" else repr(float(row[c])) for c in RUN_COLUMNS) + "\n")


def oracle_check(settings, seed):
    """Sinkhorn vs brute force on random instances; returns per-instance rows."""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(settings.n_instances):
        m = int(rng.integers(1, settings.max_rows + 1))
        n = int(rng.integers(1, settings.max_cols + 1))
        mu, nu, c = random_instance(rng, m, n)
        a = solve_uot_sinkhorn(mu, nu, c, settings.epsilon)
        b = solve_uot_bruteforce(mu, nu, c, settings.epsilon)
        rows.append({"instance": i, "rows": m, "cols": n,
                     "max_abs_diff": float(np.max(np.abs(a.pi - b.pi))),
                     "sinkhorn_iters": a.iterations, "newton_iters": b.iterations})
    return rows


def cmd_oracle_check(cfg, out):
    d = _prepare_dir(cfg, out, "oracle-check")
    seed = cfg.sub_seed("oracle")
    rows = oracle_check(cfg.oracle, seed)
    with open(os.path.join(d, "oracle.csv"), "w") as fh:
        fh.write("# uotlab oracle check v1\n")
        cols = ("instance", "rows", "cols", "max_abs_diff", "sinkhorn_iters", "newton_iters")
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(repr(r[c]) for c in cols) + "\n")
    worst = max(r["max_abs_diff"] for r in rows)
    ok = worst <= cfg.oracle.tol
    _write_json(os.path.join(d, "summary.json"), {"worst_abs_diff": worst, "tol": cfg.oracle.tol,
                                                   "passed": ok})
    _write_manifest(d, cfg, "oracle-check", {"oracle": seed})
    log.info("oracle-check: worst entrywise difference %.3e (tol %.1e)", worst, cfg.oracle.tol)
    return 0 if ok else 1


def cmd_sweep(cfg, out):
    if cfg.sweep is None:
        raise ConfigError("sweep: the config has no sweep section")
    load_pretrain(cfg, out)
    base = _prepare_dir(cfg, out, "sweep", cfg.sweep.param)
    table = []
    for value, vcfg in sweep_variants(cfg):
        # variants share the base experiment's pretrain artifacts
        vcfg = dataclasses.replace(vcfg, experiment=cfg.experiment)
        d = os.path.join(base, f"{cfg.sweep.param}={value}")
        os.makedirs(d, exist_ok=True)
        with open(os.path.join(d, "resolved.yaml"), "w") as fh:
            fh.write(dump_config(vcfg))
        report, ucfg = _unlearn_into(vcfg, out, d)
        table.append((value, report.pul_percent, report.frechet_retain, report.oos_mass,
                      ucfg.cost.margin))
    with open(os.path.join(base, "tradeoff.csv"), "w") as fh:
        fh.write("# uotlab sweep v1\n")
        fh.write(f"{cfg.sweep.param},pul,frechet_retain,oos_mass,margin\n")
        for row in table:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    xs = [t[0] for t in table]
    emit_tradeoff_plot(xs, [t[1] for t in table], [t[2] for t in table],
                       os.path.join(base, "tradeoff.svg"), cfg.sweep.param)
    _write_manifest(base, cfg, f"sweep/{cfg.sweep.param}", {"unlearn": cfg.sub_seed("unlearn")})
    return 0


def cmd_plot(cfg, out):
    g_pre, _, setup = load_pretrain(cfg, out)
    d = _prepare_dir(cfg, out, "plot")
    n, seed = 5000, cfg.eval.seed
    emit_scatter_plot(generate(g_pre, n, seed), cfg.data, os.path.join(d, "pretrain.svg"),
                      cfg.forget_index, "pretrained")
    root = os.path.join(out, cfg.experiment)
    sources = [("unlearn", os.path.join(root, "unlearn", "generator.ckpt"))]
    bdir = os.path.join(root, "baseline")
    if os.path.isdir(bdir):
        for m in sorted(os.listdir(bdir)):
            sources.append((f"baseline_{m}", os.path.join(bdir, m, "generator.ckpt")))
    for name, path in sources:
        if os.path.exists(path):
            emit_scatter_plot(generate(_load_gen(path), n, seed), cfg.data,
                              os.path.join(d, f"{name}.svg"), cfg.forget_index, name)
    _write_manifest(d, cfg, "plot", {"eval": seed})
    return 0


# --- entry point ---------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="lab", description="UOT unlearning laboratory")
    p.add_argument("command", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--out", default=None, help="output root (default: config output_dir)")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.add_argument("--method", choices=("ga", "vdu", "sa", "salun"),
                   help="baseline method (baseline subcommand)")
    p.add_argument("--checkpoint", default=None, help="generator checkpoint (eval subcommand)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        out = args.out or cfg.output_dir
        if args.command == "pretrain":
            return cmd_pretrain(cfg, out)
        if args.command == "unlearn":
            return cmd_unlearn(cfg, out)
        if args.command == "baseline":
            if args.method is None:
                raise ConfigError("baseline requires --method")
            return cmd_baseline(cfg, out, args.method)
        if args.command == "eval":
            return cmd_eval(cfg, out, args.checkpoint)
        if args.command == "oracle-check":
            return cmd_oracle_check(cfg, out)
        if args.command == "sweep":
            return cmd_sweep(cfg, out)
        return cmd_plot(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except PrerequisiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - any failure must yield a nonzero status
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
