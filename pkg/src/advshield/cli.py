"""Subcommand front end.

Every artifact is JSON, datasets are IDX pairs, metrics are CSV.  A
manifest file ties one deployment together (victim, ordered defenders,
dictionaries, fusion weights, SP) so that ``detect`` and ``evaluate``
need a single path.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 infeasible resource plan.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from . import nn
from .arch import DEFAULT_ARCH, build_network, parse_arch
from .attacks import AttackConfig, generate, parse_attack
from .data import (Dataset, load_idx, load_idx_images, make_digits, split,
                   write_idx)
from .errors import AdvShieldError, InfeasiblePlanError, ValidationError
from .evaluate import (evaluate as run_evaluation, merge_reports, sp_grid,
                       write_auc_csv, write_roc_csv)
from .latent import build_chain, load_defender, save_defender
from .pipeline import (DetectionPipeline, MANIFEST_FORMAT_VERSION,
                       load_pipeline, save_pipeline)
from .planner import (DEFAULT_OMP_PARAMS, load_budget, plan, profile_costs,
                      render_plan, save_plan)
from .sparse import (InputDefender, PatchConfig, learn_class_dictionaries,
                     load_dictionary, profile_input_defender, save_dictionary)

USAGE_EXIT = 1
DATA_EXIT = 2
INFEASIBLE_EXIT = 3


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _add_seed(p):
    p.add_argument("--seed", type=int, default=0,
                   help="RNG seed (default 0)")


def _write_manifest(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


# --- subcommand handlers ---------------------------------------------------

def cmd_make_data(args):
    ds = make_digits(args.count, seed=args.seed)
    write_idx(ds, args.out_images, args.out_labels)
    print(f"wrote {args.count} synthetic digit samples to "
          f"{args.out_images} / {args.out_labels}")
    return 0


def cmd_train_victim(args):
    ds = load_idx(args.images, args.labels)
    spec = parse_arch(args.arch)
    net = build_network(spec, seed=args.seed)
    cfg = nn.TrainConfig(learning_rate=args.learning_rate,
                         batch_size=args.batch_size, epochs=args.epochs,
                         seed=args.seed)
    net, trace = nn.train(net, ds.images, ds.labels, cfg)
    nn.save(net, args.out)
    acc = nn.accuracy(net, ds.images, ds.labels)
    print(f"trained {args.arch} for {args.epochs} epochs "
          f"(final loss {trace[-1]:.4f}, train accuracy {acc:.4f})")
    print(f"wrote {args.out}")
    return 0


def cmd_train_defender(args):
    victim = nn.load(args.victim)
    ds = load_idx(args.images, args.labels)
    parts = split(ds, {"train": 1.0 - args.profile_frac,
                       "profile": args.profile_frac}, seed=args.seed)
    cfg = nn.TrainConfig(learning_rate=args.learning_rate,
                         batch_size=args.batch_size, epochs=args.epochs,
                         seed=args.seed)
    defenders = build_chain(
        victim, parts["train"].images, parts["train"].labels,
        parts["profile"].images, args.chain, cfg,
        eta_scale=args.eta_scale, sp=args.sp, gamma=args.gamma,
        layer_index=args.layer)
    os.makedirs(args.out_dir, exist_ok=True)
    for i, defender in enumerate(defenders):
        path = os.path.join(args.out_dir, f"defender_{i}.json")
        save_defender(defender, path)
        print(f"wrote {path}")
    return 0


def cmd_learn_dicts(args):
    victim = nn.load(args.victim)
    ds = load_idx(args.images, args.labels)
    parts = split(ds, {"train": 1.0 - args.profile_frac,
                       "profile": args.profile_frac}, seed=args.seed)
    patch = PatchConfig(patch_size=args.patch_size, stride=args.stride,
                        sample_cap=args.sample_cap)
    dictionaries = learn_class_dictionaries(
        parts["train"].images, parts["train"].labels, args.classes,
        patch=patch, n_atoms=args.atoms, beta=args.beta,
        iterations=args.iterations, seed=args.seed)
    defender = InputDefender(dictionaries, sparsity=args.sparsity,
                             tol=args.tol, sp=args.sp)
    predicted = nn.predict(victim, parts["profile"].images)
    profile_input_defender(defender, parts["profile"].images, predicted)
    os.makedirs(args.out_dir, exist_ok=True)
    for d in defender.dictionaries:
        path = os.path.join(args.out_dir, f"dictionary_{d.class_id}.json")
        save_dictionary(d, path)
        print(f"wrote {path}")
    return 0


def cmd_init_manifest(args):
    base = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(base, exist_ok=True)

    def rel(path):
        return os.path.relpath(os.path.abspath(path), base)

    doc = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "sp": args.sp,
        "victim": rel(args.victim),
        "latent_defenders": [rel(p) for p in args.defender or []],
        "input_defender": None,
        "fusion": None,
        "dataset": {},
        "seed": args.seed,
    }
    if args.dictionary:
        doc["input_defender"] = {
            "dictionaries": [rel(p) for p in args.dictionary],
            "sparsity": args.sparsity,
            "tol": args.tol,
        }
    _write_manifest(args.out, doc)
    load_pipeline(args.out)  # referenced artifacts must exist and load
    print(f"wrote {args.out}")
    return 0


def cmd_calibrate(args):
    pipeline, doc = load_pipeline(args.manifest)
    if args.sp is not None:
        pipeline.set_sp(args.sp)
        doc["sp"] = args.sp
    ds = load_idx(args.images, args.labels)
    specs = args.attack or ["fgs:eps=0.1", "bim:step=0.002,iters=50"]
    configs = [parse_attack(s) for s in specs]
    adv_sets = [generate(pipeline.victim, ds.images, ds.labels, c)
                for c in configs]
    pipeline.calibrate(ds.images, np.concatenate(adv_sets, axis=0),
                       [c.describe() for c in configs])
    model = pipeline.fusion_model
    doc["fusion"] = {
        "defender_order": pipeline.defender_names(),
        "reliabilities": [float(p) for p in model.reliabilities],
        "decision_threshold": model.decision_threshold,
        "calibration_attacks": list(model.calibration_attacks),
    }
    doc.setdefault("dataset", {})["calibration"] = {
        "images": args.images, "labels": args.labels,
        "count": int(ds.images.shape[0]),
    }
    _write_manifest(args.manifest, doc)
    for name, p in zip(pipeline.defender_names(), model.reliabilities):
        print(f"P_n[{name}] = {p:.4f}")
    print(f"updated {args.manifest}")
    return 0


def cmd_attack(args):
    victim = nn.load(args.victim)
    ds = load_idx(args.images, args.labels)
    config = AttackConfig(kind=args.kind, epsilon=args.eps,
                          n_iters=args.iters, step=args.step)
    adv = generate(victim, ds.images, ds.labels, config)
    images_path = args.out + "-images.idx"
    labels_path = args.out + "-labels.idx"
    write_idx(Dataset(adv, ds.labels), images_path, labels_path)
    fooled = nn.predict(victim, adv) != ds.labels
    manifest = {
        "attack": config.to_dict(),
        "name": config.describe(),
        "victim": args.victim,
        "source_images": args.images,
        "source_labels": args.labels,
        "images": images_path,
        "labels": labels_path,
        "count": int(ds.images.shape[0]),
        "success_rate": float(fooled.mean()),
    }
    _write_manifest(args.out + ".json", manifest)
    print(f"{config.describe()}: fooled victim on "
          f"{fooled.mean():.1%} of {ds.images.shape[0]} samples")
    print(f"wrote {images_path}, {labels_path}, {args.out}.json")
    return 0


def cmd_detect(args):
    pipeline, _ = load_pipeline(args.manifest)
    if args.sp is not None:
        pipeline.set_sp(args.sp)
    images = load_idx_images(args.input)
    result = pipeline.detect(images)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out)
        writer.writerow(["sample", "predicted", "probability", "verdict"])
        for i in range(images.shape[0]):
            writer.writerow([
                i, int(result.predicted[i]),
                f"{result.probability[i]:.6f}",
                "reject" if result.reject[i] else "accept"])
    finally:
        if args.out:
            out.close()
    rejected = int(result.reject.sum())
    print(f"rejected {rejected}/{images.shape[0]} samples",
          file=sys.stderr if not args.out else sys.stdout)
    return 0


def cmd_evaluate(args):
    pipeline, _ = load_pipeline(args.manifest)
    benign = load_idx(args.benign[0], args.benign[1])
    grid = sp_grid(args.sp_grid)
    names = list(args.attack_name or [])
    reports = []
    for i, (images_path, labels_path) in enumerate(args.adversarial):
        adv = load_idx(images_path, labels_path)
        name = names[i] if i < len(names) else f"attack-{i + 1}"
        reports.append(run_evaluation(
            pipeline, benign.images, benign.labels, adv.images, adv.labels,
            grid=grid, attack_name=name))
    report = reports[0] if len(reports) == 1 else merge_reports(reports)
    os.makedirs(args.out_dir, exist_ok=True)
    paths = write_roc_csv(report, args.out_dir)
    paths.append(write_auc_csv(report, args.out_dir))
    for (attack, n_def), score in sorted(report.auc_scores.items()):
        print(f"AUC[{attack}, n_def={n_def}] = {score:.4f}")
    for path in paths:
        print(f"wrote {path}")
    return 0


def cmd_plan(args):
    budget = load_budget(args.budget)
    profile = profile_costs(parse_arch(args.arch),
                            omp_params=tuple(args.omp))
    plan_obj = plan(budget, profile)
    print(render_plan(plan_obj))
    if args.out:
        save_plan(plan_obj, args.out)
        print(f"wrote {args.out}")
    return 0


# --- parser wiring ---------------------------------------------------------

def build_parser():
    parser = _Parser(prog="advshield",
                     description="Adversarial-input detection toolkit: "
                                 "train victims and defenders, learn "
                                 "dictionaries, attack, detect, evaluate, "
                                 "and plan hardware layouts.")
    parser.add_argument("--version", action="version",
                        version=f"advshield {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("make-data",
                       help="generate a synthetic digit IDX pair")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--out-images", required=True)
    p.add_argument("--out-labels", required=True)
    _add_seed(p)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train-victim", help="train the victim classifier")
    p.add_argument("--arch", default=DEFAULT_ARCH)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--learning-rate", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=3)
    _add_seed(p)
    p.set_defaults(func=cmd_train_victim)

    p = sub.add_parser("train-defender",
                       help="fine-tune chained latent defenders")
    p.add_argument("--victim", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--layer", type=int, default=None,
                   help="checkpoint layer index "
                        "(default: before the last dense layer)")
    p.add_argument("--gamma", type=float, default=0.01)
    p.add_argument("--chain", type=int, default=1,
                   help="number of chained defenders")
    p.add_argument("--sp", type=float, default=5.0)
    p.add_argument("--profile-frac", type=float, default=0.2)
    p.add_argument("--eta-scale", type=float, default=0.1)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=10)
    _add_seed(p)
    p.set_defaults(func=cmd_train_defender)

    p = sub.add_parser("learn-dicts",
                       help="learn per-class patch dictionaries")
    p.add_argument("--victim", required=True,
                   help="victim model used to label the profiling split")
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--atoms", type=int, default=225)
    p.add_argument("--beta", type=float, default=0.15)
    p.add_argument("--iterations", type=int, default=5)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--sample-cap", type=int, default=1200)
    p.add_argument("--sparsity", type=int, default=8)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--sp", type=float, default=5.0)
    p.add_argument("--profile-frac", type=float, default=0.2)
    _add_seed(p)
    p.set_defaults(func=cmd_learn_dicts)

    p = sub.add_parser("init-manifest",
                       help="tie trained artifacts into one manifest")
    p.add_argument("--victim", required=True)
    p.add_argument("--defender", action="append", default=[],
                   help="latent defender JSON (repeatable, in order)")
    p.add_argument("--dictionary", action="append", default=[],
                   help="patch dictionary JSON (repeatable)")
    p.add_argument("--sparsity", type=int, default=8)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--sp", type=float, default=5.0)
    p.add_argument("--out", required=True)
    _add_seed(p)
    p.set_defaults(func=cmd_init_manifest)

    p = sub.add_parser("calibrate",
                       help="estimate defender reliabilities and store "
                            "them in the manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--attack", action="append",
                   help="attack spec like fgs:eps=0.1 or "
                        "bim:step=0.002,iters=50 (repeatable; default both)")
    p.add_argument("--sp", type=float, default=None)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("attack", help="generate adversarial samples")
    p.add_argument("--victim", required=True)
    p.add_argument("--kind", required=True, choices=["fgs", "bim"])
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--iters", type=int, default=1)
    p.add_argument("--step", type=float, default=None)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True,
                   help="output prefix: writes <out>-images.idx, "
                        "<out>-labels.idx, <out>.json")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("detect", help="per-sample verdicts for an IDX file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--input", required=True, help="IDX image file")
    p.add_argument("--out", default=None,
                   help="verdict CSV path (default stdout)")
    p.add_argument("--sp", type=float, default=None,
                   help="override the manifest SP")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="sweep SP into ROC/AUC CSVs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--benign", nargs=2, metavar=("IMAGES", "LABELS"),
                   required=True)
    p.add_argument("--adversarial", nargs=2, metavar=("IMAGES", "LABELS"),
                   action="append", required=True,
                   help="adversarial IDX pair (repeatable)")
    p.add_argument("--attack-name", action="append",
                   help="label for the matching --adversarial pair")
    p.add_argument("--sp-grid", default="0:100:5")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plan",
                       help="resource-constrained defense layout search")
    p.add_argument("--budget", required=True, help="budget JSON path")
    p.add_argument("--arch", default=DEFAULT_ARCH)
    p.add_argument("--omp", nargs=3, type=int, metavar=("N", "L", "K"),
                   default=list(DEFAULT_OMP_PARAMS),
                   help="input-defender OMP size (signal dim, atoms, "
                        "sparsity)")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_plan)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse handles --help/--version and usage errors by exiting;
        # surface the code as a return value so callers need no try.
        return exc.code if exc.code is not None else 0
    if not hasattr(args, "func"):
        parser.print_help(sys.stderr)
        return USAGE_EXIT
    try:
        return args.func(args)
    except InfeasiblePlanError as exc:
        print(f"advshield: infeasible plan: {exc}", file=sys.stderr)
        return INFEASIBLE_EXIT
    except AdvShieldError as exc:
        print(f"advshield: error: {exc}", file=sys.stderr)
        return DATA_EXIT
    except (OSError, json.JSONDecodeError) as exc:
        print(f"advshield: error: {exc}", file=sys.stderr)
        return DATA_EXIT


if __name__ == "__main__":
    sys.exit(main())
