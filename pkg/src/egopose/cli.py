"""Command-line entry point: ``egopose <subcommand> ...``.

Exit status is 0 on success, 1 for data errors and 2 for usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .codebook import build_codebook, build_single_codebook, load_codebook, quantization_stats, save_codebook
from .dataio import load_dataset, write_blob
from .errors import EgoPoseError
from .evaluation import (
    ABLATIONS,
    SUBSTITUTION_MODES,
    PoseModel,
    ablate_features,
    baseline_constant,
    evaluate,
    substitute_second_person,
)
from .gradcheck import check_gradients
from .synthdata import SynthConfig, generate
from .training import HEAD_KINDS, TrainConfig, load_checkpoint, model_config_for, save_checkpoint, train

log = logging.getLogger("egopose")

GRADCHECK_TOL = 1e-4


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors: print usage, exit 2
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _read_json(path) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _train_config(args) -> TrainConfig:
    base = _read_json(getattr(args, "train_config", None))
    flags = {
        "epochs": args.epochs,
        "batch_size": args.batch,
        "seed": args.seed,
        "window_len": args.window_len,
        "window_overlap": args.window_overlap,
        "min_window_len": args.min_window_len,
        "lr_phase1": args.lr1,
        "lr_phase2": args.lr2,
        "lr_switch_epoch": args.lr_switch,
        "precision": args.precision,
        "sampling_prob": args.sampling_prob,
        "sampling_ramp_epochs": args.sampling_ramp,
        "prev_noise": args.prev_noise,
    }
    base.update({k: v for k, v in flags.items() if v is not None})
    return TrainConfig(**base)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train-config", help="JSON file with TrainConfig fields; flags override it")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--window-len", type=int)
    p.add_argument("--window-overlap", type=int)
    p.add_argument("--min-window-len", type=int)
    p.add_argument("--lr1", type=float)
    p.add_argument("--lr2", type=float)
    p.add_argument("--lr-switch", type=int, help="last epoch trained at --lr1")
    p.add_argument("--precision", choices=["float32", "float64"])
    p.add_argument("--sampling-prob", type=float)
    p.add_argument("--sampling-ramp", type=int)
    p.add_argument("--prev-noise", type=float)
    p.add_argument("--second-person", choices=SUBSTITUTION_MODES, default="true_detector",
                   help="second-person channel to train on; 3D modes widen the model input")
    p.add_argument("--E", type=int, default=256, help="embedding size")
    p.add_argument("--D", type=int, default=512, help="LSTM hidden size")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="egopose", description="Egocentric pose estimation from second-person cues.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset bundle")
    p.add_argument("--config", help="JSON file with SynthConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("build-codebook", help="fit pose codebooks on the train split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--single", action="store_true", help="one full-body codebook instead of upper/lower")
    p.add_argument("--k-upp", type=int, default=700)
    p.add_argument("--k-bot", type=int, default=100)
    p.add_argument("--k", type=int, default=500, help="codebook size with --single")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-init", type=int, default=1)
    p.add_argument("--max-iters", type=int, default=100)

    p = sub.add_parser("train", help="train one model head")
    p.add_argument("--dataset", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--head", required=True, choices=HEAD_KINDS)
    p.add_argument("--out", required=True)
    p.add_argument("--no-o", action="store_true", help="zero the second-person channel")
    p.add_argument("--no-x", action="store_true", help="zero the scene channel")
    _add_train_flags(p)

    p = sub.add_parser("infer", help="decode sequences and write predicted ids and skeletons")
    p.add_argument("--dataset", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score checkpoints on a split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--substitute", choices=SUBSTITUTION_MODES, default="true_detector")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--baselines", action="store_true", help="also report the Stand and Sit baselines")
    p.add_argument("--out")

    p = sub.add_parser("ablate", help="train the feature-ablation variants and report them")
    p.add_argument("--dataset", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--variants", nargs="+", choices=list(ABLATIONS), default=list(ABLATIONS))
    p.add_argument("--out", required=True)
    _add_train_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    p.add_argument("--seed", type=int, default=7)

    p = sub.add_parser("quantstats", help="quantization error of a codebook")
    p.add_argument("--dataset", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--split", default="train")
    return parser


# ----------------------------------------------------------------------------
# subcommands


def _cmd_synth(args) -> int:
    cfg_dict = _read_json(args.config)
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    path = generate(SynthConfig.from_dict(cfg_dict), args.out)
    print(f"wrote {path}")
    return 0


def _gt_poses(dataset, split: str) -> np.ndarray:
    poses = [s.gt for s in dataset.split(split) if s.gt is not None]
    if not poses:
        raise EgoPoseError(f"split {split!r} has no ground-truth poses")
    return np.concatenate(poses).astype(np.float64)


def _cmd_build_codebook(args) -> int:
    ds = load_dataset(args.dataset)
    poses = _gt_poses(ds, "train")
    if args.single:
        cb = build_single_codebook(poses, ds.layout, K=args.k, seed=args.seed, max_iters=args.max_iters,
                                   n_init=args.n_init)
    else:
        cb = build_codebook(poses, ds.layout, K_upp=args.k_upp, K_bot=args.k_bot, seed=args.seed,
                            max_iters=args.max_iters, n_init=args.n_init)
    out = save_codebook(cb, args.out)
    print(f"wrote {out}")
    return 0


def _load_pair(args):
    cb = load_codebook(args.codebook)
    ds = load_dataset(args.dataset, codebook_layout_hash=cb.layout.hash())
    return ds, cb


def _training_view(ds, args):
    if args.second_person == "true_detector":
        return ds
    return substitute_second_person(ds, args.second_person, seed=args.seed or 0, reference=ds.subset("train"))


def _cmd_train(args) -> int:
    ds, cb = _load_pair(args)
    ds = _training_view(ds, args)
    tc = _train_config(args)
    o_dim = ds.sequences[0].keypoints.shape[1]
    mc = model_config_for(args.head, cb, E=args.E, D=args.D, o_dim=o_dim, use_o=not args.no_o, use_x=not args.no_x)
    out = Path(args.out)
    state = train(ds, cb, args.head, mc, tc, checkpoint_dir=out)
    final = save_checkpoint(state, out / f"{args.head}.ckpt")
    print(f"wrote {final} (final loss {state.loss_curve[-1][2]:.4f})" if state.loss_curve else f"wrote {final}")
    return 0


def _pose_model(cb, checkpoints) -> PoseModel:
    heads = {}
    for path in checkpoints:
        st = load_checkpoint(path)
        heads[st.head] = st
    return PoseModel(cb, heads)


def _cmd_infer(args) -> int:
    ds, cb = _load_pair(args)
    model = _pose_model(cb, args.checkpoint)
    seqs = ds.split(args.split)
    out = Path(args.out)
    for seq, (ids, poses) in zip(seqs, model.predict(seqs)):
        write_blob(out / seq.id / "pred_ids.y2me", ids.reshape(len(ids), -1).astype(np.float32))
        write_blob(out / seq.id / "pred_pose.y2me", poses.reshape(len(poses), -1))
    print(f"wrote predictions for {len(seqs)} sequences to {out}")
    return 0


def _cmd_eval(args) -> int:
    ds, cb = _load_pair(args)
    model = _pose_model(cb, args.checkpoint)
    test = ds.subset(args.split)
    if args.substitute != "true_detector":
        test = substitute_second_person(test, args.substitute, seed=args.seed, reference=ds.subset("train"))
    report = evaluate(model, test.sequences, ds.activities)
    print(report.table(f"{args.split} split, second person: {args.substitute}"))
    if args.out:
        out = Path(args.out)
        report.to_csv(out / "report.csv")
    if args.baselines:
        for mode in ("stand", "sit"):
            _, rep = baseline_constant(mode, ds.split("train"), test.sequences, ds.layout, ds.activities)
            print(rep.table(f"baseline {mode}"))
            if args.out:
                rep.to_csv(Path(args.out) / f"baseline_{mode}.csv")
    return 0


def _cmd_ablate(args) -> int:
    ds, cb = _load_pair(args)
    ds = _training_view(ds, args)
    tc = _train_config(args)
    out = Path(args.out)
    lines = [f"{'variant':<10}{'Upp':>8}{'Bot':>8}{'All':>8}{'acc':>8}"]
    for name in args.variants:
        use_o, use_x = ABLATIONS[name]
        model, report = ablate_features(ds, cb, tc, use_o=use_o, use_x=use_x, E=args.E, D=args.D)
        slug = name.replace("/", "").replace(" ", "_")
        report.to_csv(out / f"{slug}.csv")
        for head, st in model.heads.items():
            save_checkpoint(st, out / f"{slug}_{head}.ckpt")
        lines.append(f"{name:<10}{report.upper:>8.2f}{report.lower:>8.2f}{report.overall:>8.2f}"
                     f"{100 * report.mean_accuracy:>7.1f}%")
    print("\n".join(lines))
    return 0


def _cmd_gradcheck(args) -> int:
    worst = 0.0
    for head in ("classification", "regression"):
        res = check_gradients(head, seed=args.seed)
        for name, err in res.rel_errors.items():
            print(f"{head:<15}{name:<10}{err:.3e}")
        worst = max(worst, res.max_rel_error)
    print(f"max rel err {worst:.3e}")
    return 0 if worst < GRADCHECK_TOL else 1


def _cmd_quantstats(args) -> int:
    cb = load_codebook(args.codebook)
    ds = load_dataset(args.dataset, codebook_layout_hash=cb.layout.hash())
    stats = quantization_stats(_gt_poses(ds, args.split), cb)
    print(f"poses            {stats['n_poses']}")
    print(f"per joint (cm)   {stats['per_joint_cm']:.4f}  (aligned)")
    print(f"per joint (cm)   {stats['raw_per_joint_cm']:.4f}  (person-centric)")
    print(f"per pose (cm)    {stats['per_pose_cm']:.4f}")
    return 0


COMMANDS = {
    "synth": _cmd_synth,
    "build-codebook": _cmd_build_codebook,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
    "quantstats": _cmd_quantstats,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except EgoPoseError as exc:
        print(f"egopose: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"egopose: {exc}", file=sys.stderr)
        return 1
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        print(f"egopose: invalid configuration: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
