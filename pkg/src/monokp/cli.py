"""Command-line entry point.

Exit codes: 0 success, 1 check failure, 2 input error, 3 degenerate geometry.
Every subcommand is deterministic given ``--seed``; the default seed comes
from the MONOKP_SEED environment variable, falling back to 0.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import mapsio
from .augment import AffineAug, identity_aug, make_aug, transform_predictions
from .codec import PredictionSet, decode_objects, predictions_from_boxes
from .errors import FormatError, GeometryError, MonoKPError
from .evaluation import LEVELS, METRICS, EvalConfig, average_precision
from .geometry import NUM_KEYPOINTS, CameraModel, Dimension3D, KeypointSet, ObjectBox3D, alpha_to_theta, bbox_from_3d, project_box
from .grm import grm_backward, keypoint_dropout, solve_full
from .kitti_io import KittiObject, box_to_gt, format_calib, parse_calib, parse_labels, write_labels
from .losses import consistency_loss
from .oracles import SceneSpec, finite_diff_gradients, generate_scene, relative_error, sample_box

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_DEGENERATE = 0, 1, 2, 3
SEED_ENV = "MONOKP_SEED"
GRADCHECK_TOL = 1e-4
EXTREME_TRIALS = 5000
CLASS_NAMES = ("Car", "Pedestrian", "Cyclist")


class InputError(MonoKPError):
    """Bad paths or inconsistent inputs; maps to exit code 2."""


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise InputError(f"{SEED_ENV}={raw!r} is not an integer") from None


# ------------------------------------------------------------- reports


def render(rows: list[dict], fmt: str) -> str:
    if fmt == "json":
        return json.dumps(rows, indent=2, default=_json_default) + "\n"
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _csv_value(v) for k, v in row.items()})
    return buf.getvalue()


def _json_default(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(type(v).__name__)


def _csv_value(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return " ".join(str(x) for x in v)
    return v


def emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _read(path) -> str:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"no such file: {p}")
    return p.read_text()


def load_calib(path) -> CameraModel:
    try:
        return parse_calib(_read(path))[0]
    except FormatError as exc:
        raise exc.with_path(path) from None


def _mask_str(mask) -> str:
    return "".join("1" if m else "0" for m in mask)


# ------------------------------------------------------------- solve


def load_keypoint_records(path) -> list[dict]:
    """Objects from a keypoints JSON file (see README for the schema)."""
    try:
        doc = json.loads(_read(path))
    except json.JSONDecodeError as exc:
        raise FormatError(exc.msg, exc.lineno, exc.colno, path) from None
    objects = doc.get("objects") if isinstance(doc, dict) else None
    if not isinstance(objects, list):
        raise FormatError("expected an object with an 'objects' list", path=path)
    records = []
    for i, obj in enumerate(objects):
        try:
            pts = np.asarray(obj["keypoints"], dtype=np.float64).reshape(NUM_KEYPOINTS, 2)
            mask = np.asarray(obj.get("mask", [1] * NUM_KEYPOINTS), dtype=bool).reshape(NUM_KEYPOINTS)
            dim = Dimension3D(*obj["dim"])
            if "theta" not in obj and "alpha" not in obj:
                raise KeyError("theta")
            rec = {"id": obj.get("id", i), "cls": obj.get("cls", 0), "kps": KeypointSet(pts, mask), "dim": dim}
            rec["theta"] = obj.get("theta")
            rec["alpha"] = obj.get("alpha")
        except (KeyError, TypeError, ValueError, GeometryError) as exc:
            raise FormatError(f"object {i}: bad or missing field {exc}", path=path) from None
        records.append(rec)
    return records


def records_from_maps(path) -> list[dict]:
    try:
        maps = mapsio.load(path)
    except OSError as exc:
        raise InputError(str(exc)) from None
    return [
        {"id": i, "cls": p.cls, "kps": p.keypoints, "dim": p.dim, "theta": None, "alpha": p.alpha}
        for i, p in enumerate(decode_objects(maps, run_grm=False))
    ]


def drop_mask(rng: np.random.Generator, n_drop: int) -> np.ndarray:
    mask = np.ones(NUM_KEYPOINTS, bool)
    mask[rng.choice(NUM_KEYPOINTS, size=n_drop, replace=False)] = False
    return mask


def cmd_solve(args) -> int:
    cam = load_calib(args.calib)
    if (args.maps is None) == (args.keypoints is None):
        raise InputError("give exactly one of --maps or --keypoints")
    records = records_from_maps(args.maps) if args.maps else load_keypoint_records(args.keypoints)
    if not 0 <= args.drop_keypoints <= NUM_KEYPOINTS - 2:
        raise InputError(f"--drop-keypoints must be in [0, {NUM_KEYPOINTS - 2}]")
    rng = np.random.default_rng(args.seed)
    rows = []
    for rec in records:
        kps = rec["kps"]
        if args.drop_keypoints:
            kps = kps.with_mask(kps.mask & drop_mask(rng, args.drop_keypoints))
        theta = rec["theta"]
        if theta is None:
            theta = alpha_to_theta(rec["alpha"], kps.pts[8], cam)
        try:
            sol = solve_full(kps, rec["dim"], theta, cam)
        except GeometryError as exc:
            print(f"error: object {rec['id']}: {exc}", file=sys.stderr)
            return EXIT_DEGENERATE
        sv = list(sol.singular_values) + [float("nan")] * (3 - len(sol.singular_values))
        rows.append(
            {
                "object": rec["id"],
                "cls": rec["cls"],
                "X": float(sol.T[0]),
                "Y": float(sol.T[1]),
                "Z": float(sol.T[2]),
                "theta": float(theta),
                "residual": float(sol.residual),
                "sv1": float(sv[0]),
                "sv2": float(sv[1]),
                "sv3": float(sv[2]),
                "mask": _mask_str(sol.mask),
            }
        )
    emit(render(rows, args.format), args.out)
    return EXIT_OK


# ------------------------------------------------------------- gradcheck


def random_box(rng: np.random.Generator, spec: SceneSpec | None = None):
    spec = spec or SceneSpec()
    while True:
        sample = sample_box(rng, spec)
        if sample is not None:
            dims, theta, T, _ = sample
            return ObjectBox3D(Dimension3D(*dims), theta, T)


def gradient_error(box: ObjectBox3D, cam: CameraModel, mask, step: float = 1e-5) -> float:
    """Max relative error of the analytic position Jacobian against central differences.

    Only kept keypoints are perturbed; the analytic columns of dropped
    keypoints must be exactly zero (a nonzero value counts as error 1).
    """
    mask = np.asarray(mask, bool)
    pts = project_box(cam, box).pts
    kept = np.flatnonzero(np.repeat(mask, 2))
    dims = box.dim.as_array()
    x0 = np.concatenate([pts.ravel()[kept], dims, [box.theta]])
    nk = len(kept)

    def fn(x):
        p = pts.ravel().copy()
        p[kept] = x[:nk]
        return solve_full(KeypointSet(p.reshape(NUM_KEYPOINTS, 2), mask), x[nk : nk + 3], x[-1], cam).T

    numeric = finite_diff_gradients(fn, x0, step)
    g = grm_backward(KeypointSet(pts, mask), dims, box.theta, cam)
    analytic = np.hstack([g.dT_dkp[:, kept], g.dT_ddim, g.dT_dtheta[:, None]])
    dropped = np.delete(g.dT_dkp, kept, axis=1)
    if np.any(dropped != 0.0):
        return 1.0
    return float(relative_error(analytic, numeric).max())


def all_masks(min_keep: int = 2):
    for k in range(min_keep, NUM_KEYPOINTS + 1):
        for idx in itertools.combinations(range(NUM_KEYPOINTS), k):
            mask = np.zeros(NUM_KEYPOINTS, bool)
            mask[list(idx)] = True
            yield mask


def cmd_gradcheck(args) -> int:
    if args.trials < 0:
        raise InputError("--trials must be nonnegative")
    if args.trials == 0:
        print("warning: --trials 0, nothing checked", file=sys.stderr)
    rng = np.random.default_rng(args.seed)
    cam = CameraModel(SceneSpec().P)
    rows, failed = [], False
    for trial in range(args.trials):
        box = random_box(rng)
        masks = list(all_masks()) if args.all_masks else [keypoint_dropout(rng, args.drop_prob)]
        worst, worst_mask, skipped = 0.0, masks[0], 0
        for mask in masks:
            try:
                err = gradient_error(box, cam, mask)
            except GeometryError:
                skipped += 1
                continue
            if err >= worst:
                worst, worst_mask = err, mask
        ok = worst < GRADCHECK_TOL
        failed |= not ok
        rows.append(
            {
                "trial": trial,
                "masks": len(masks) - skipped,
                "skipped": skipped,
                "worst_mask": _mask_str(worst_mask),
                "max_rel_error": worst,
                "pass": ok,
            }
        )
    emit(render(rows, args.format), args.out)
    print(f"gradcheck: {args.trials} trials, {'FAIL' if failed else 'pass'}", file=sys.stderr)
    return EXIT_CHECK if failed else EXIT_OK


# ------------------------------------------------------------- fixture


def cmd_fixture(args) -> int:
    out = Path(args.out)
    for sub in ("calib", "label_2", "maps", "keypoints"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for n in range(args.scenes):
        spec = SceneSpec(seed=args.seed + n, n_objects=args.objects, noise_sigma=args.sigma)
        scene = generate_scene(spec)
        stem = f"{n:06d}"
        (out / "calib" / f"{stem}.txt").write_text(format_calib(scene.cam.P))
        labels = []
        for box in scene.boxes:
            labels.append(box_to_gt(box, bbox=tuple(float(v) for v in bbox_from_3d(scene.cam, box))))
        (out / "label_2" / f"{stem}.txt").write_text(write_labels(labels))
        mapsio.save(scene.maps, out / "maps" / f"{stem}.hmap")
        objects = [
            {
                "id": i,
                "cls": 0,
                "keypoints": kps.pts.tolist(),
                "mask": [1] * NUM_KEYPOINTS,
                "dim": list(box.dim.as_array()),
                "alpha": box.alpha,
                "theta": box.theta,
                "T": box.T.tolist(),
            }
            for i, (box, kps) in enumerate(zip(scene.boxes, scene.noisy_keypoints))
        ]
        (out / "keypoints" / f"{stem}.json").write_text(json.dumps({"objects": objects}, indent=1) + "\n")
    print(f"wrote {args.scenes} scenes to {out}", file=sys.stderr)
    return EXIT_OK


# ------------------------------------------------------------- eval


def _stems(directory, suffix: str = ".txt") -> dict[str, Path]:
    d = Path(directory)
    if not d.is_dir():
        raise InputError(f"no such directory: {d}")
    return {p.stem: p for p in sorted(d.glob(f"*{suffix}"))}


def _labels(path: Path) -> list[KittiObject]:
    try:
        return parse_labels(path.read_text())
    except FormatError as exc:
        raise exc.with_path(path) from None


def cmd_eval(args) -> int:
    gt_files = _stems(args.gt)
    det_files = _stems(args.det)
    calib_files = _stems(args.calib) if args.calib else None
    extra = sorted(set(det_files) - set(gt_files))
    if extra:
        raise InputError(f"detections without ground truth: {', '.join(extra[:5])}")
    if calib_files is not None:
        missing = sorted(set(gt_files) - set(calib_files))
        if missing:
            raise InputError(f"ground truth without calibration: {', '.join(missing[:5])}")
        for stem in gt_files:
            load_calib(calib_files[stem])
    stems = sorted(gt_files)
    gts = [_labels(gt_files[s]) for s in stems]
    dets = [_labels(det_files[s]) if s in det_files else [] for s in stems]
    classes = args.classes or [c for c in CLASS_NAMES if any(o.type == c for g in gts for o in g)]
    rows = []
    for metric in args.metrics:
        cfg = EvalConfig(metric=metric, sampling=args.sampling)
        for cls in classes:
            res = average_precision(dets, gts, cls, cfg)
            for level in LEVELS:
                rows.append(
                    {
                        "class": cls,
                        "metric": metric,
                        "difficulty": level.name.lower(),
                        "threshold": res.threshold,
                        "sampling": args.sampling,
                        "AP": res.ap[level],
                    }
                )
    emit(render(rows, args.format), args.out)
    return EXIT_OK


# ------------------------------------------------------------- extreme


def extreme_errors(rng: np.random.Generator, sigmas, trials: int, cam: CameraModel | None = None) -> np.ndarray:
    """Position errors, shape (len(sigmas), trials, 8) for k = 2..9 kept keypoints.

    Each trial shares one box, one noise draw per sigma and one keypoint
    order, so the k-masks are nested.  Failed solves count as inf.
    """
    spec = SceneSpec()
    cam = cam or CameraModel(spec.P)
    errors = np.full((len(sigmas), trials, NUM_KEYPOINTS - 1), np.inf)
    for t in range(trials):
        box = random_box(rng, spec)
        pts = project_box(cam, box).pts
        unit_noise = rng.normal(0.0, 1.0, (NUM_KEYPOINTS, 2))
        order = rng.permutation(NUM_KEYPOINTS)
        for si, sigma in enumerate(sigmas):
            noisy = pts + sigma * unit_noise
            for j, k in enumerate(range(2, NUM_KEYPOINTS + 1)):
                mask = np.zeros(NUM_KEYPOINTS, bool)
                mask[order[:k]] = True
                try:
                    T = solve_full(KeypointSet(noisy, mask), box.dim, box.theta, cam).T
                except GeometryError:
                    continue
                errors[si, t, j] = float(np.linalg.norm(T - box.T))
    return errors


def cmd_extreme(args) -> int:
    if args.trials <= 0:
        raise InputError("--trials must be positive")
    rng = np.random.default_rng(args.seed)
    errors = extreme_errors(rng, args.sigma, args.trials)
    rows = []
    for si, sigma in enumerate(args.sigma):
        for j, k in enumerate(range(2, NUM_KEYPOINTS + 1)):
            e = errors[si, :, j]
            finite = e[np.isfinite(e)]
            rows.append(
                {
                    "sigma": float(sigma),
                    "k": k,
                    "trials": args.trials,
                    "failures": int(len(e) - len(finite)),
                    "median_error": float(np.median(e)),
                    "mean_error": float(finite.mean()) if len(finite) else float("nan"),
                }
            )
    emit(render(rows, args.format), args.out)
    return EXIT_OK


# ------------------------------------------------------------- consistency


def parse_aug(text: str, image_width: float) -> AffineAug:
    """"identity" or comma-separated key=value with keys scale, shift (dx:dy), flip (0/1)."""
    if text.strip() == "identity":
        return identity_aug(image_width)
    fields = {"scale": "1", "shift": "0:0", "flip": "0"}
    for part in text.split(","):
        key, sep, value = part.partition("=")
        key = key.strip()
        if not sep or key not in fields:
            raise InputError(f"bad augmentation field {part!r} in {text!r}")
        fields[key] = value.strip()
    try:
        dx, dy = (float(v) for v in fields["shift"].split(":"))
        return make_aug(float(fields["scale"]), (dx, dy), fields["flip"] not in ("0", "false", "no"), image_width)
    except ValueError:
        raise InputError(f"bad augmentation spec {text!r}") from None


def fixture_predictions(args) -> tuple[CameraModel, list[PredictionSet], float]:
    """Exact predictions for the fixture scene (or a generated one)."""
    if args.fixture:
        root = Path(args.fixture)
        stem = args.stem or next(iter(_stems(root / "label_2")), None)
        if stem is None:
            raise InputError(f"{root}/label_2 holds no label files")
        cam = load_calib(root / "calib" / f"{stem}.txt")
        boxes = []
        for obj in _labels(root / "label_2" / f"{stem}.txt"):
            if obj.type != "DontCare":
                h, w, l = obj.dimensions
                x, y, z = obj.location
                boxes.append(ObjectBox3D(Dimension3D(h, w, l), obj.rotation_y, (x, y - h / 2.0, z)))
        width = float(args.image_width)
    else:
        scene = generate_scene(SceneSpec(seed=args.seed, n_objects=args.objects))
        cam, boxes, width = scene.cam, scene.boxes, float(scene.spec.image_size[0])
    return cam, predictions_from_boxes(boxes, cam), width


def cmd_consistency(args) -> int:
    cam, preds, width = fixture_predictions(args)
    rng = np.random.default_rng(args.seed)
    aug1 = parse_aug(args.aug1, width)
    aug2 = parse_aug(args.aug2, width)
    view1 = transform_predictions(preds, aug1)
    view2 = transform_predictions(preds, aug2)
    if args.dropout > 0:
        view1 = [replace(p, keypoints=p.keypoints.with_mask(keypoint_dropout(rng, args.dropout))) for p in view1]
        view2 = [replace(p, keypoints=p.keypoints.with_mask(keypoint_dropout(rng, args.dropout))) for p in view2]
    if args.perturb_dims:
        view2 = [replace(p, dim=Dimension3D(*(p.dim.as_array() + args.perturb_dims))) for p in view2]
    res = consistency_loss(view1, aug1, view2, aug2, cam)
    row = {
        "objects": len(preds),
        "pairs": len(res.pairs),
        "loss": res.loss,
        "position": res.position,
        "orientation": res.orientation,
        "dimension": res.dimension,
    }
    emit(render([row], args.format), args.out)
    return EXIT_OK


# ------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    seed = default_seed()
    parser = argparse.ArgumentParser(prog="monokp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, fmt="csv"):
        p.add_argument("--seed", type=int, default=seed, help=f"RNG seed (default ${SEED_ENV} or 0)")
        p.add_argument("--format", choices=("csv", "json"), default=fmt)
        p.add_argument("--out", help="write the report here instead of stdout")

    p = sub.add_parser("solve", help="solve object positions from keypoints")
    p.add_argument("--calib", required=True, help="KITTI calibration file (P2 is used)")
    p.add_argument("--maps", help="head-map container (.hmap)")
    p.add_argument("--keypoints", help="keypoints JSON file")
    p.add_argument("--drop-keypoints", type=int, default=0, metavar="N", help="drop N random keypoints per object")
    common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference position gradients")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--all-masks", action="store_true", help="check every mask with at least 2 keypoints")
    p.add_argument("--drop-prob", type=float, default=0.5)
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("fixture", help="write synthetic scenes in KITTI layout")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=1)
    p.add_argument("--objects", type=int, default=3)
    p.add_argument("--sigma", type=float, default=0.0, help="keypoint noise, pixels")
    p.add_argument("--seed", type=int, default=seed)
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("eval", help="AP / AOS of KITTI-format detections")
    p.add_argument("--det", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--calib")
    p.add_argument("--metrics", nargs="+", choices=METRICS, default=["AP2D", "APBEV", "AP3D"])
    p.add_argument("--sampling", type=int, choices=(11, 40), default=40)
    p.add_argument("--classes", nargs="+")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("extreme", help="position error vs number of kept keypoints")
    p.add_argument("--sigma", type=float, nargs="+", default=[0.0, 2.0])
    p.add_argument("--trials", type=int, default=EXTREME_TRIALS)
    common(p)
    p.set_defaults(func=cmd_extreme)

    p = sub.add_parser("consistency", help="consistency loss between two augmented views")
    p.add_argument("--fixture", help="fixture directory (default: generate a scene)")
    p.add_argument("--stem", help="which fixture file (default: first)")
    p.add_argument("--image-width", type=float, default=1280.0)
    p.add_argument("--objects", type=int, default=3)
    p.add_argument("--aug1", default="identity")
    p.add_argument("--aug2", default="identity")
    p.add_argument("--dropout", type=float, default=0.0, help="keypoint drop probability per view")
    p.add_argument("--perturb-dims", type=float, default=0.0, help="add this to every view-2 dimension")
    common(p)
    p.set_defaults(func=cmd_consistency)
    return parser


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.func(args)
    except (FormatError, InputError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except GeometryError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except MonoKPError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
