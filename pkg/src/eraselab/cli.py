"""Command-line pipeline with reproducible run directories.

Every command writes its artifacts under --out together with a
manifest.json (command, resolved config snapshot, seeds, version). Exit
codes: 0 ok, 1 config, 2 io, 3 numerical, 4 format.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import __version__
from . import analysis as an
from . import diffusion as df
from . import erasure as er
from . import guidance as gd
from . import nnet
from . import persistence as ps
from . import report as rp
from . import toyworld as tw
from .errors import (ConfigError, FormatError, NumericalError,
                     StructuralError)


def _utc_stamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def _write_manifest(out_dir, command, cfg, seeds) -> None:
    manifest = {
        "command": command,
        "version": f"eraselab-{__version__}",
        "created_utc": _utc_stamp(),
        "seeds": seeds,
        "config": cfg.snapshot_dict() if cfg is not None else None,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _prepare_out(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _checkpoint_meta(cfg, kind, extra=None) -> dict:
    vocab, _ = cfg.vocab_and_spec()
    meta = {
        "kind": kind,
        "mode": cfg.mode,
        "schedule": {"t_train": cfg.t_train, "beta_start": cfg.beta_start,
                     "beta_end": cfg.beta_end},
        "vocab": [c.name for c in vocab.concepts],
    }
    if extra:
        meta.update(extra)
    return meta


def _generate(cfg, n_per_concept, seed):
    _, spec = cfg.vocab_and_spec()
    if cfg.mode == "points2d":
        return tw.gen_points2d(spec, n_per_concept, seed=seed)
    return tw.gen_glyphs(spec, n_per_concept, seed=seed)


def _oracle(cfg):
    _, spec = cfg.vocab_and_spec()
    if cfg.mode == "points2d":
        def classify(x):
            label, posterior = tw.bayes_classify(spec, x)
            return label, float(posterior[label])
        return classify
    return tw.template_oracle(spec)


def _sample_batch(model, cfg, concept, n, seed, gamma):
    return df.sample_final_batch(model, cfg.schedule(), cfg.sampler(),
                                 concept, gd.cfg_guidance(model, gamma),
                                 n, seed)


def cmd_gen_data(args) -> int:
    cfg = ps.load_config(args.config)
    out = _prepare_out(args)
    seed = cfg.seed if args.seed is None else args.seed
    dataset = _generate(cfg, args.n, seed)
    tw.dataset_to_csv(dataset, os.path.join(out, "dataset.csv"))
    _write_manifest(out, "gen-data", cfg, {"dataset": seed})
    print(f"wrote {len(dataset.labels)} samples to {out}/dataset.csv")
    return 0


def cmd_train_base(args) -> int:
    cfg = ps.load_config(args.config)
    out = _prepare_out(args)
    vocab, _ = cfg.vocab_and_spec()
    data_seed = cfg.seed if args.seed is None else args.seed
    if args.data is not None:
        dataset = tw.dataset_from_csv(args.data, cfg.mode, vocab.size)
    else:
        dataset = _generate(cfg, args.n, data_seed)
    loss_log = []
    model = df.train_base(dataset, cfg.network_shape(), cfg.schedule(),
                          steps=cfg.base_steps, p_uncond=cfg.base_p_uncond,
                          seed=cfg.base_seed, lr=cfg.base_lr,
                          batch_size=cfg.base_batch, loss_log=loss_log)
    meta = _checkpoint_meta(cfg, "base", {"steps": cfg.base_steps,
                                          "seed": cfg.base_seed})
    ps.write_checkpoint(model, meta, os.path.join(out, "base.ssrg"))
    rp.write_csv(os.path.join(out, "train_loss.csv"), ("step", "loss"),
                 [(str(step), loss) for step, loss in loss_log])
    _write_manifest(out, "train-base", cfg,
                    {"dataset": data_seed, "train": cfg.base_seed})
    print(f"wrote {out}/base.ssrg after {cfg.base_steps} steps")
    return 0


def cmd_erase(args) -> int:
    cfg = ps.load_config(args.config)
    out = _prepare_out(args)
    vocab, _ = cfg.vocab_and_spec()
    base, _ = ps.read_checkpoint(args.base)
    ecfg = cfg.erase if args.seed is None \
        else dataclasses.replace(cfg.erase, seed=args.seed)
    model, log = er.erase_finetune(base, ecfg, cfg.schedule(), vocab)
    meta = _checkpoint_meta(cfg, "erased", {
        "loss_kind": ecfg.loss_kind, "lambda": ecfg.lam, "seed": ecfg.seed,
        "base": os.fspath(args.base)})
    ps.write_checkpoint(model, meta, os.path.join(out, "erased.ssrg"))
    ckpt_dir = os.path.join(out, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    for iteration, snapshot in log.snapshots:
        ps.write_checkpoint(snapshot, dict(meta, iteration=iteration),
                            os.path.join(ckpt_dir, f"iter_{iteration:04d}.ssrg"))
    rp.write_csv(os.path.join(out, "loss.csv"),
                 ("iteration", "t_index", "concept", "penalty", "total"),
                 [(str(it), str(t), loss.concept, loss.penalty, loss.total)
                  for it, t, loss in log.iterations])
    _write_manifest(out, "erase", cfg, {"erase": ecfg.seed})
    print(f"wrote {out}/erased.ssrg, {len(log.snapshots)} checkpoints, "
          f"loss.csv ({ecfg.n_iters} iterations)")
    return 0


def cmd_sample(args) -> int:
    cfg = ps.load_config(args.config)
    out = _prepare_out(args)
    vocab, _ = cfg.vocab_and_spec()
    model, _ = ps.read_checkpoint(args.model)
    concept = vocab.id_of(args.concept)
    seed = cfg.seed if args.seed is None else args.seed
    gamma = cfg.eval_gamma if args.gamma is None else args.gamma
    X = _sample_batch(model, cfg, concept, args.n, seed, gamma)
    dataset = tw.Dataset(X, np.full(args.n, concept), mode=cfg.mode,
                         n_concepts=vocab.size)
    tw.dataset_to_csv(dataset, os.path.join(out, "samples.csv"))
    _write_manifest(out, "sample", cfg, {"sample": seed})
    print(f"wrote {args.n} samples of {args.concept!r} "
          f"(gamma={gamma:g}) to {out}/samples.csv")
    return 0


def cmd_invert(args) -> int:
    cfg = ps.load_config(args.config)
    out = _prepare_out(args)
    vocab, _ = cfg.vocab_and_spec()
    model, _ = ps.read_checkpoint(args.model)
    dataset = tw.dataset_from_csv(args.data, cfg.mode, vocab.size)
    sched, sampler = cfg.schedule(), cfg.sampler()
    guid = df.conditional_eps(model)
    latents, recon_rows = [], []
    for i in range(len(dataset.labels)):
        x0 = dataset.samples[i]
        c = int(dataset.labels[i])
        z_T = df.ddim_invert(x0, model, sched, sampler, c)
        recon, _, _ = df.descend(z_T[None, :], sampler, sched, c, guid, 0,
                                 record=False)
        denom = max(float(np.linalg.norm(x0)), 1e-300)
        recon_rows.append((str(i), str(c),
                           float(np.linalg.norm(recon[0] - x0)) / denom))
        latents.append(z_T)
    tw.dataset_to_csv(tw.Dataset(np.array(latents), dataset.labels,
                                 mode=cfg.mode, n_concepts=vocab.size),
                      os.path.join(out, "inverted.csv"))
    rp.write_csv(os.path.join(out, "recon.csv"),
                 ("index", "label", "rel_l2"), recon_rows)
    _write_manifest(out, "invert", cfg, {})
    mean_err = float(np.mean([r[2] for r in recon_rows]))
    print(f"inverted {len(recon_rows)} samples, "
          f"mean reconstruction rel L2 {mean_err:.4g}")
    return 0


def _timeline(cfg, ckpt_dir, concept, n, seed):
    files = sorted(f for f in os.listdir(ckpt_dir) if f.endswith(".ssrg"))
    iterations, rates = [], []
    oracle = _oracle(cfg)
    for name in files:
        snapshot, meta = ps.read_checkpoint(os.path.join(ckpt_dir, name))
        X = _sample_batch(snapshot, cfg, concept, n, seed, cfg.eval_gamma)
        iterations.append(int(meta.get("iteration", len(iterations))))
        rates.append(an.erasure_rate(X, concept, oracle, cfg.threshold))
    return {"iterations": iterations, "rates": rates}


def cmd_eval(args) -> int:
    cfg = ps.load_config(args.config)
    out = _prepare_out(args)
    vocab, _ = cfg.vocab_and_spec()
    base, _ = ps.read_checkpoint(args.base)
    model, model_meta = ps.read_checkpoint(args.model)
    method = args.method or model_meta.get("loss_kind", "ours")
    oracle = _oracle(cfg)
    sched, sampler = cfg.schedule(), cfg.sampler()
    n = cfg.n_samples if args.n is None else args.n
    erase_set = cfg.erase.erase_set
    non_targets = tuple(c for c in range(vocab.size) if c not in erase_set)

    rates = {}
    for c in erase_set:
        X = _sample_batch(model, cfg, c, n, cfg.seed, cfg.eval_gamma)
        rates[c] = an.erasure_rate(X, c, oracle, cfg.threshold)
    kernel = an.KernelSpec()
    drift = {}
    for c in non_targets:
        Xb = _sample_batch(base, cfg, c, args.drift_n, cfg.seed + c, cfg.eval_gamma)
        Xm = _sample_batch(model, cfg, c, args.drift_n, cfg.seed + c + 10_000,
                           cfg.eval_gamma)
        drift[c] = an.mmd2(Xb, Xm, kernel)
    consistency = an.seed_consistency(base, model, sched, sampler,
                                      concepts=non_targets,
                                      seeds=cfg.consistency_seeds,
                                      gamma=cfg.eval_gamma)
    metrics = an.MetricReport(erasure_rates=rates, drift=drift,
                              consistency=consistency, sample_count=n,
                              seeds=cfg.consistency_seeds,
                              threshold=cfg.threshold)

    ckpt_dir = args.checkpoints
    if ckpt_dir is None:
        sibling = os.path.join(os.path.dirname(os.path.abspath(args.model)),
                               "checkpoints")
        ckpt_dir = sibling if os.path.isdir(sibling) else None
    timeline = None
    if ckpt_dir is not None:
        timeline = _timeline(cfg, ckpt_dir, erase_set[0], args.timeline_n,
                             cfg.seed)

    payload = {"method": method, "report": json.loads(metrics.to_json()),
               "timeline": timeline}
    with open(os.path.join(out, "metrics.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out, "eval", cfg, {"eval": cfg.seed})
    worst = max(rates.values())
    print(f"method={method} max target rate={worst:.3f} over {n} samples; "
          f"metrics.json written to {out}")
    return 0


def cmd_sweep_lambda(args) -> int:
    cfg = ps.load_config(args.config)
    out = _prepare_out(args)
    vocab, _ = cfg.vocab_and_spec()
    base, _ = ps.read_checkpoint(args.base)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--values: {exc}") from exc
    if not values:
        raise ConfigError("--values: need at least one lambda")
    sched, sampler = cfg.schedule(), cfg.sampler()
    oracle = _oracle(cfg)
    erase_set = cfg.erase.erase_set
    non_targets = tuple(c for c in range(vocab.size) if c not in erase_set)
    rows = []
    for lam in values:
        ecfg = dataclasses.replace(cfg.erase, lam=lam)
        model, _ = er.erase_finetune(base, ecfg, sched, vocab)
        ps.write_checkpoint(model,
                            _checkpoint_meta(cfg, "erased",
                                             {"loss_kind": ecfg.loss_kind,
                                              "lambda": lam,
                                              "seed": ecfg.seed}),
                            os.path.join(out, f"lambda_{lam:g}.ssrg"))
        X = _sample_batch(model, cfg, erase_set[0], args.n, cfg.seed,
                          cfg.eval_gamma)
        rate = an.erasure_rate(X, erase_set[0], oracle, cfg.threshold)
        cons = an.seed_consistency(base, model, sched, sampler,
                                   concepts=non_targets,
                                   seeds=cfg.consistency_seeds,
                                   gamma=cfg.eval_gamma)
        rows.append((lam, rate, float(np.mean(list(cons.values())))))
        print(f"lambda={lam:g}: erasure rate={rate:.3f} "
              f"consistency={rows[-1][2]:.4f}")
    rp.write_csv(os.path.join(out, "sweep.csv"),
                 ("lambda", "erasure_rate", "consistency"), rows)
    _write_manifest(out, "sweep-lambda", cfg, {"erase": cfg.erase.seed})
    return 0


def cmd_verify_theory(args) -> int:
    cfg = ps.load_config(args.config)
    out = _prepare_out(args)
    sched = cfg.schedule()
    rng = np.random.default_rng(cfg.seed)
    checks = []

    gaps = np.diff(sched.alpha_bar)
    checks.append(("alpha_bar_strictly_decreasing", float(gaps.max()), 0.0,
                   bool(np.all(gaps < 0.0))))

    worst = 0.0
    for t in range(2, sched.T_train + 1):
        w, w_prime = an.loss_weights(t, sched)
        a_t = float(sched.alpha[t - 1])
        implied = w_prime * (1.0 - a_t) ** 2 / a_t
        worst = max(worst, abs(w - implied) / abs(w))
    checks.append(("loss_weight_identity_rel_err", worst, 1e-12,
                   worst <= 1e-12))

    d = 3
    mu1 = rng.standard_normal(d)
    mu2 = rng.standard_normal(d)
    sigma2 = 0.7
    closed = an.kl_guided_gaussians(mu1, mu2, sigma2)
    draws = mu1 + np.sqrt(sigma2) * rng.standard_normal((1_000_000, d))
    log_ratio = ((draws - mu2) ** 2 - (draws - mu1) ** 2).sum(axis=1) / (2 * sigma2)
    mc = float(log_ratio.mean())
    rel = abs(mc - closed) / closed
    checks.append(("kl_monte_carlo_rel_err", rel, 2e-2, rel <= 2e-2))

    vocab, _ = cfg.vocab_and_spec()
    teacher = nnet.init_params(cfg.network_shape(), vocab.size, seed=cfg.seed)
    student = teacher.copy()
    for name in student.tensor_names():
        arr = student.get_tensor(name)
        student.set_tensor(name, arr + 1e-3 * rng.standard_normal(arr.shape))
    probes = [(rng.standard_normal(cfg.input_dim()),
               int(rng.integers(2, sched.T_train + 1)),
               int(rng.integers(0, vocab.size)),
               int(rng.integers(0, vocab.size)))
              for _ in range(16)]
    chain = an.kl_chain_check(teacher, student, sched, probes,
                              gamma1=cfg.erase.gamma1,
                              gamma2=cfg.erase.gamma2)
    checks.append(("kl_chain_two_path_rel", chain.max_rel_discrepancy, 1e-10,
                   chain.max_rel_discrepancy <= 1e-10))
    checks.append(("kl_chain_decomposition", chain.max_decomposition_err,
                   1e-12, chain.max_decomposition_err <= 1e-12))

    held = all(an.triangle_bound_holds(rng.standard_normal(4),
                                       rng.standard_normal(4))
               for _ in range(1000))
    checks.append(("triangle_bound_fraction", 1.0 if held else 0.0, 1.0, held))

    rp.write_csv(os.path.join(out, "theory.csv"),
                 ("check", "value", "tolerance", "status"),
                 [(name, value, tol, "pass" if ok else "fail")
                  for name, value, tol, ok in checks])
    _write_manifest(out, "verify-theory", cfg, {"probe": cfg.seed})
    for name, value, tol, ok in checks:
        print(f"{'pass' if ok else 'FAIL'} {name}: {value:.3e} "
              f"(tolerance {tol:g})")
    failed = [name for name, _, _, ok in checks if not ok]
    if failed:
        raise NumericalError(f"theory checks failed: {', '.join(failed)}")
    return 0


def cmd_report(args) -> int:
    out = _prepare_out(args)
    written = rp.emit_report(args.runs, out)
    _write_manifest(out, "report", None, {})
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eraselab",
        description="Train tiny diffusion models, erase concepts, measure "
                    "the damage.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, handler, help_text, config_required=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=config_required,
                       help="run configuration file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.set_defaults(handler=handler)
        return p

    p = add("gen-data", cmd_gen_data, "generate a labeled dataset CSV")
    p.add_argument("--n", type=int, default=500, help="samples per concept")

    p = add("train-base", cmd_train_base, "train the base model")
    p.add_argument("--data", default=None, help="dataset CSV (default: generate)")
    p.add_argument("--n", type=int, default=500, help="samples per concept "
                   "when generating")

    p = add("erase", cmd_erase, "fine-tune a concept away from a base model")
    p.add_argument("--base", required=True, help="base checkpoint")

    p = add("sample", cmd_sample, "sample one concept from a checkpoint")
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--concept", required=True, help="concept name")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--gamma", type=float, default=None,
                   help="guidance scale (default: config eval_gamma)")

    p = add("invert", cmd_invert, "invert samples to latents and check "
            "reconstruction")
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--data", required=True, help="samples CSV to invert")

    p = add("eval", cmd_eval, "metric report for an erased checkpoint")
    p.add_argument("--base", required=True, help="base checkpoint")
    p.add_argument("--model", required=True, help="erased checkpoint")
    p.add_argument("--method", default=None,
                   help="method label (default: checkpoint metadata)")
    p.add_argument("--n", type=int, default=None,
                   help="samples per erased concept (default: config)")
    p.add_argument("--drift-n", type=int, default=200,
                   help="batch size per side for the drift metric")
    p.add_argument("--checkpoints", default=None,
                   help="snapshot directory for the erasure timeline "
                        "(default: 'checkpoints' next to the model)")
    p.add_argument("--timeline-n", type=int, default=100,
                   help="samples per snapshot for the timeline")

    p = add("sweep-lambda", cmd_sweep_lambda, "erase at several lambda values")
    p.add_argument("--base", required=True, help="base checkpoint")
    p.add_argument("--values", default="0,0.5,1,1.5,5",
                   help="comma-separated lambda values")
    p.add_argument("--n", type=int, default=200,
                   help="samples for the per-lambda erasure rate")

    add("verify-theory", cmd_verify_theory,
        "run the analytic identity checks; nonzero exit on failure")

    p = add("report", cmd_report, "aggregate run directories into CSV + SVG",
            config_required=False)
    p.add_argument("--runs", nargs="+", required=True,
                   help="run directories containing metrics.json")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 4
    except (ConfigError, StructuralError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
