"""Command-line interface.

One executable with subcommands: ``synth``, ``infer``, ``fit-shape``,
``train-crf``, ``moments``, ``eval``. Every option can also be supplied
through a JSON config file (``--config``); explicit command-line values
take precedence over the config, which takes precedence over built-in
defaults. Config keys are the option names with dashes replaced by
underscores.

Exit codes: 0 on complete success, 2 for invalid arguments or missing
input files (nothing is written), 1 for runtime or per-sample failures.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .crf import PairwiseSet
from .errors import UnderdeterminedProblemError
from .evaluation import (
    DEFAULT_CED_STEPS,
    DEFAULT_FAILURE_THRESHOLD,
    build_report,
    nme,
)
from .fitting import FitOptions, fit_deform_params
from .inference import InferOptions, infer
from .model import project_points, shape_instance, synthetic_model
from .training import TrainOptions, train_crf
from .unary import Heatmap, SynthSpec, moments_from_heatmap, synth_generate

__all__ = ["main"]


class CliInputError(Exception):
    """Bad arguments or missing inputs; exits with status 2."""


def _require_file(path, what: str) -> Path:
    if path is None:
        raise CliInputError(f"missing required option: {what}")
    p = Path(path)
    if not p.is_file():
        raise CliInputError(f"{what} not found: {p}")
    return p


def _require(value, what: str):
    if value is None:
        raise CliInputError(f"missing required option: {what}")
    return value


def _apply_config(ns: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    """Fill options the command line left at None from the JSON config."""
    if ns.config is None:
        return
    cfg_path = _require_file(ns.config, "--config")
    doc = io.load_json(cfg_path)
    if not isinstance(doc, dict):
        raise CliInputError(f"{cfg_path}: config must be a JSON object")
    known = {a.dest for a in parser._actions}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise CliInputError(f"{cfg_path}: unknown config keys: {', '.join(unknown)}")
    for key, value in doc.items():
        if getattr(ns, key, None) is None:
            setattr(ns, key, value)


def _default(ns: argparse.Namespace, **defaults) -> None:
    for key, value in defaults.items():
        if getattr(ns, key) is None:
            setattr(ns, key, value)


# ---------------------------------------------------------------- synth


def cmd_synth(ns: argparse.Namespace, parser) -> int:
    _apply_config(ns, parser)
    _default(
        ns,
        noise=0.02,
        corrupt=0.0,
        corrupt_bias=0.15,
        corrupt_cov_scale=100.0,
        pitch_range=[-0.3, 0.3],
        yaw_range=[-0.5, 0.5],
        roll_range=[-0.3, 0.3],
        scale_range=[0.8, 1.3],
        q_sigma=0.1,
        base_scale=0.2,
        gen_seed=0,
    )
    out = Path(_require(ns.out, "--out"))
    num = int(_require(ns.num, "--num"))
    seed = int(_require(ns.seed, "--seed"))

    if ns.model is not None:
        model = io.load_shape_model(_require_file(ns.model, "--model"))
        generated_model = None
    elif ns.gen_landmarks is not None and ns.gen_bases is not None:
        model = synthetic_model(int(ns.gen_landmarks), int(ns.gen_bases), int(ns.gen_seed))
        generated_model = model
    else:
        raise CliInputError(
            "provide --model, or both --gen-landmarks and --gen-bases"
        )

    spec = SynthSpec(
        num_samples=num,
        seed=seed,
        noise_sigma=float(ns.noise),
        corrupt_fraction=float(ns.corrupt),
        corrupt_bias=float(ns.corrupt_bias),
        corrupt_cov_scale=float(ns.corrupt_cov_scale),
        pitch_range=tuple(ns.pitch_range),
        yaw_range=tuple(ns.yaw_range),
        roll_range=tuple(ns.roll_range),
        scale_range=tuple(ns.scale_range),
        q_sigma=float(ns.q_sigma),
        base_scale=float(ns.base_scale),
    )
    generated = synth_generate(model, spec)
    spec_doc = {
        "num_samples": spec.num_samples,
        "seed": spec.seed,
        "noise_sigma": spec.noise_sigma,
        "corrupt_fraction": spec.corrupt_fraction,
        "corrupt_bias": spec.corrupt_bias,
        "corrupt_cov_scale": spec.corrupt_cov_scale,
        "pitch_range": list(spec.pitch_range),
        "yaw_range": list(spec.yaw_range),
        "roll_range": list(spec.roll_range),
        "scale_range": list(spec.scale_range),
        "q_sigma": spec.q_sigma,
        "base_scale": spec.base_scale,
    }
    io.write_dataset(out, generated, spec_doc=spec_doc)
    if generated_model is not None:
        io.save_shape_model(generated_model, out / "model.json")
    print(f"wrote {len(generated)} samples to {out}")
    return 0


# ---------------------------------------------------------------- infer


def cmd_infer(ns: argparse.Namespace, parser) -> int:
    _apply_config(ns, parser)
    _default(ns, tol=1e-5, max_iters=50, lambda_q=0.0, jobs=1, unary_only=False)
    model = io.load_shape_model(_require_file(ns.model, "--model"))
    pairs = io.load_pairwise(_require_file(ns.crf, "--crf"))
    data_dir = Path(_require(ns.data, "--data"))
    manifest = io.load_manifest(_require_file(data_dir / "manifest.json", "manifest"))
    out = Path(_require(ns.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    opts = InferOptions(
        tol=float(ns.tol),
        max_iters=int(ns.max_iters),
        fit=FitOptions(lambda_q=float(ns.lambda_q)),
    )

    def run_one(sid: str):
        unaries = io.load_unary(data_dir / f"{sid}.unary.json")
        if ns.unary_only:
            io.save_prediction(
                unaries.means, None, 0, True, [], out / f"{sid}.pred.json"
            )
            return
        y, params, trace = infer(unaries, pairs, model, opts)
        io.save_prediction(
            y,
            params,
            trace.iterations,
            trace.converged,
            trace.iteration_energies,
            out / f"{sid}.pred.json",
        )

    failures: list[tuple[str, str]] = []

    def safe(sid: str):
        try:
            run_one(sid)
        except Exception as exc:  # per-sample isolation
            failures.append((sid, str(exc)))
            io.save_json({"id": sid, "error": str(exc)}, out / f"{sid}.error.json")

    ids = manifest["ids"]
    jobs = max(1, int(ns.jobs))
    if jobs == 1:
        for sid in ids:
            safe(sid)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(safe, ids))

    if failures:
        failures.sort()
        for sid, msg in failures:
            print(f"error: sample {sid}: {msg}", file=sys.stderr)
        print(f"{len(failures)}/{len(ids)} samples failed", file=sys.stderr)
        return 1
    print(f"wrote {len(ids)} predictions to {out}")
    return 0


# ------------------------------------------------------------- fit-shape


def cmd_fit_shape(ns: argparse.Namespace, parser) -> int:
    _apply_config(ns, parser)
    _default(ns, target="gt", lambda_q=1e-3, max_iters=200, emit_landmarks=False)
    model = io.load_shape_model(_require_file(ns.model, "--model"))
    pairs = io.load_pairwise(_require_file(ns.crf, "--crf"))
    data_dir = Path(_require(ns.data, "--data"))
    manifest = io.load_manifest(_require_file(data_dir / "manifest.json", "manifest"))
    out = Path(_require(ns.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    opts = FitOptions(lambda_q=float(ns.lambda_q), max_iters=int(ns.max_iters))

    failures = []
    for sid in manifest["ids"]:
        try:
            if ns.target == "gt":
                y, _ = io.load_ground_truth(data_dir / f"{sid}.gt.json")
            else:
                y = io.load_unary(data_dir / f"{sid}.unary.json").means
            params, diag = fit_deform_params(y, pairs, model, opts=opts)
            io.save_deform_params(params, out / f"{sid}.zeta.json")
            if ns.emit_landmarks:
                projected = project_points(
                    shape_instance(model, params.shape_coeffs), params
                )
                recon = projected + (
                    y.reshape(-1, 2).mean(axis=0) - projected.mean(axis=0)
                )
                io.save_prediction(
                    recon,
                    params,
                    diag.iterations,
                    diag.converged,
                    [],
                    out / f"{sid}.pred.json",
                )
        except (ValueError, UnderdeterminedProblemError) as exc:
            failures.append((sid, str(exc)))
    if failures:
        for sid, msg in failures:
            print(f"error: sample {sid}: {msg}", file=sys.stderr)
        return 1
    print(f"fitted {len(manifest['ids'])} samples into {out}")
    return 0


# ------------------------------------------------------------- train-crf


def cmd_train(ns: argparse.Namespace, parser) -> int:
    _apply_config(ns, parser)
    _default(
        ns,
        step_size=1e-3,
        max_outer=100,
        pose_rounds=2,
        coupling_steps=50,
        lambda_q=1e-3,
    )
    model = io.load_shape_model(_require_file(ns.model, "--model"))
    data_dir = Path(_require(ns.data, "--data"))
    _require_file(data_dir / "manifest.json", "manifest")
    out = Path(_require(ns.out, "--out"))
    init_pairs = None
    if ns.init_crf is not None:
        init_pairs = io.load_pairwise(_require_file(ns.init_crf, "--init-crf"))

    samples, _, _ = io.load_dataset(data_dir)
    opts = TrainOptions(
        step_size=float(ns.step_size),
        max_outer=int(ns.max_outer),
        pose_rounds=int(ns.pose_rounds),
        coupling_steps=int(ns.coupling_steps),
        fit=FitOptions(lambda_q=float(ns.lambda_q)),
    )
    pairs, poses, report = train_crf(samples, model, init_pairs=init_pairs, opts=opts)

    out.parent.mkdir(parents=True, exist_ok=True)
    io.save_pairwise(pairs, out)
    report_path = Path(ns.report) if ns.report else out.parent / "train_report.json"
    io.save_json(
        {
            "nll_per_epoch": report.nll_per_epoch,
            "final_nll": report.final_nll,
            "epochs": report.epochs,
            "converged": report.converged,
            "final_step_size": report.final_step_size,
            "zetas": {
                s.id: io.deform_params_dict(p) for s, p in zip(samples, poses)
            },
        },
        report_path,
    )
    print(
        f"trained on {len(samples)} samples: NLL {report.nll_per_epoch[0]:.6g} -> "
        f"{report.final_nll:.6g} in {report.epochs} epochs"
    )
    return 0


# --------------------------------------------------------------- moments


def cmd_moments(ns: argparse.Namespace, parser) -> int:
    _apply_config(ns, parser)
    _default(ns, floor=1e-8)
    maps = io.read_heatmaps(_require_file(ns.heatmaps, "--heatmaps"))
    out = Path(_require(ns.out, "--out"))
    means, covs = [], []
    for k in range(maps.shape[0]):
        mu, sigma = moments_from_heatmap(Heatmap(values=maps[k]), floor=float(ns.floor))
        means.append(mu)
        covs.append(sigma)
    from .crf import UnaryPrediction

    io.save_unary(
        UnaryPrediction(means=np.array(means), covariances=np.array(covs)), out
    )
    print(f"extracted moments for {maps.shape[0]} landmarks into {out}")
    return 0


# ------------------------------------------------------------------ eval


def cmd_eval(ns: argparse.Namespace, parser) -> int:
    _apply_config(ns, parser)
    _default(
        ns,
        grid_max=DEFAULT_FAILURE_THRESHOLD,
        grid_steps=DEFAULT_CED_STEPS,
        threshold=DEFAULT_FAILURE_THRESHOLD,
    )
    pred_dir = Path(_require(ns.pred, "--pred"))
    data_dir = Path(_require(ns.data, "--data"))
    manifest = io.load_manifest(_require_file(data_dir / "manifest.json", "manifest"))
    out = Path(_require(ns.out, "--out"))

    ids = manifest["ids"]
    errors = []
    for sid in ids:
        gt, bbox = io.load_ground_truth(data_dir / f"{sid}.gt.json")
        pred = io.load_prediction(_require_file(pred_dir / f"{sid}.pred.json", "prediction"))
        errors.append(nme(pred["landmarks"], gt, bbox[0], bbox[1]))

    report = build_report(
        errors,
        grid_max=float(ns.grid_max),
        grid_steps=int(ns.grid_steps),
        threshold=float(ns.threshold),
    )
    out.mkdir(parents=True, exist_ok=True)
    io.save_eval_report(report, ids, out / "report.json")
    io.write_ced_csv(report.ced, out / "ced.csv")

    from .plots import save_ced_figure, save_nme_histogram

    save_ced_figure(report, out / "ced.png")
    save_nme_histogram(report, out / "nme_hist.png")
    print(
        f"n={len(ids)} mean_nme={np.mean(errors):.5f} auc={report.auc:.4f} "
        f"fr={report.failure_rate:.4f}"
    )
    return 0


# ----------------------------------------------------------------- parser


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON file supplying any option below")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shapecrf",
        description="Structured landmark prediction with a Gaussian CRF "
        "and a 3D deformable shape prior.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--model", help="shape model JSON")
    p.add_argument("--gen-landmarks", type=int, help="generate a model: landmark count")
    p.add_argument("--gen-bases", type=int, help="generate a model: basis count")
    p.add_argument("--gen-seed", type=int, help="generate a model: seed (default 0)")
    p.add_argument("--out", help="output dataset directory")
    p.add_argument("--num", type=int, help="number of samples")
    p.add_argument("--seed", type=int, help="generator seed (required)")
    p.add_argument("--noise", type=float, help="unary noise sigma (default 0.02)")
    p.add_argument("--corrupt", type=float, help="corrupted landmark fraction (default 0)")
    p.add_argument("--corrupt-bias", type=float, help="corruption offset (default 0.15)")
    p.add_argument(
        "--corrupt-cov-scale", type=float, help="corruption covariance factor (default 100)"
    )
    p.add_argument("--pitch-range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--yaw-range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--roll-range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--scale-range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--q-sigma", type=float, help="shape coefficient sigma (default 0.1)")
    p.add_argument("--base-scale", type=float, help="crop scale factor (default 0.2)")
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("infer", help="joint inference over a dataset")
    _add_common(p)
    p.add_argument("--model", help="shape model JSON")
    p.add_argument("--crf", help="pairwise couplings JSON")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="output predictions directory")
    p.add_argument("--unary-only", action="store_true", default=None,
                   help="bypass the CRF and output the unary means")
    p.add_argument("--tol", type=float, help="landmark-change tolerance (default 1e-5)")
    p.add_argument("--max-iters", type=int, help="iteration budget (default 50)")
    p.add_argument("--lambda-q", type=float, help="pose-step regularizer (default 0)")
    p.add_argument("--jobs", type=int, help="parallel workers (default 1)")
    p.set_defaults(func=cmd_infer)

    p = subs.add_parser("fit-shape", help="fit deformable parameters per sample")
    _add_common(p)
    p.add_argument("--model", help="shape model JSON")
    p.add_argument("--crf", help="pairwise couplings JSON")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--target", choices=["gt", "unary-means"],
                   help="landmarks to fit (default gt)")
    p.add_argument("--lambda-q", type=float, help="coefficient regularizer (default 1e-3)")
    p.add_argument("--max-iters", type=int, help="iteration budget (default 200)")
    p.add_argument("--emit-landmarks", action="store_true", default=None,
                   help="also write model-reconstructed landmark predictions")
    p.set_defaults(func=cmd_fit_shape)

    p = subs.add_parser("train-crf", help="learn pairwise couplings")
    _add_common(p)
    p.add_argument("--model", help="shape model JSON")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="output couplings JSON path")
    p.add_argument("--init-crf", help="initial couplings JSON (default 0.01*I)")
    p.add_argument("--step-size", type=float, help="gradient step (default 1e-3)")
    p.add_argument("--max-outer", type=int, help="epoch budget (default 100)")
    p.add_argument("--pose-rounds", type=int, help="pose refits per epoch (default 2)")
    p.add_argument("--coupling-steps", type=int,
                   help="gradient steps per epoch (default 50)")
    p.add_argument("--lambda-q", type=float, help="pose-fit regularizer (default 1e-3)")
    p.add_argument("--report", help="training report path (default train_report.json)")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("moments", help="extract unary moments from heatmaps")
    _add_common(p)
    p.add_argument("--heatmaps", help="binary heatmap stack (HMAP format)")
    p.add_argument("--out", help="output unary JSON")
    p.add_argument("--floor", type=float, help="covariance floor (default 1e-8)")
    p.set_defaults(func=cmd_moments)

    p = subs.add_parser("eval", help="score predictions against ground truth")
    _add_common(p)
    p.add_argument("--pred", help="predictions directory")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="output report directory")
    p.add_argument("--grid-max", type=float, help="CED grid upper end (default 0.07)")
    p.add_argument("--grid-steps", type=int, help="CED grid points (default 701)")
    p.add_argument("--threshold", type=float, help="AUC/FR threshold (default 0.07)")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    sub = next(
        sp for sp in parser._subparsers._group_actions[0].choices.values()
        if sp.get_default("func") is ns.func
    )
    try:
        return ns.func(ns, sub)
    except CliInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
