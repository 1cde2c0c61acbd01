"""Command-line front end: ``tessellate {plan,subsample,stitch,roundtrip,info}``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import store
from .curate import REPORT_FORMAT, CurationReport, LabelConvention, border_mask
from .errors import (
    CoverageError,
    FormatError,
    IncompleteInputError,
    InvalidSpecError,
    ShapeError,
    TessellateError,
    UndefinedStatisticError,
    UnrecognizedArtifactError,
)
from .geometry import PLAN_FORMAT, PatchPlan, TensorLayout, WindowSpec, axis_positions, build_plan
from .stitch import MANIFEST, MANIFEST_FORMAT, StitchPolicy, read_manifest, stitch_stream
from .subsample import PLAN_ATTR, create_stack_store, iter_patches
from .volume import open_volume, sidecar_path

logger = logging.getLogger("tessellate")

EXIT_OK = 0
EXIT_MISMATCH = 1
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_COVERAGE = 4
EXIT_INCOMPLETE = 5


@dataclass
class PipelineConfig:
    window: list | None = None
    step: list | None = None
    border: list | None = None
    border_weight: float = 1.0
    sentinel: float = -1.0
    chunk: list | None = None
    on_zero_coverage: str = "error"
    workers: int | None = None

    def window_spec(self, rank: int) -> WindowSpec:
        if self.window is None:
            raise InvalidSpecError("--window is required")
        window = _broadcast(self.window, rank, "window")
        step = _broadcast(self.step, rank, "step") if self.step is not None else window
        border = _broadcast(self.border, rank, "border") if self.border is not None else 0
        return WindowSpec(window, step, border, self.border_weight)

    def convention(self) -> LabelConvention:
        return LabelConvention(self.sentinel)

    def policy(self, output_channels: int) -> StitchPolicy:
        return StitchPolicy.parse(self.on_zero_coverage, output_channels)

    def chunk_shape(self, rank: int):
        return None if self.chunk is None else _broadcast(self.chunk, rank, "chunk")

    def validate(self, rank: int, need_window: bool = True) -> WindowSpec | None:
        """Check every knob before any file is written."""
        spec = self.window_spec(rank) if need_window or self.window is not None else None
        self.convention()
        self.policy(1)
        self.chunk_shape(rank)
        if self.workers is not None and self.workers < 1:
            raise InvalidSpecError(f"--workers must be >= 1, got {self.workers}")
        return spec


def _broadcast(values, rank: int, name: str) -> tuple[int, ...]:
    values = list(values)
    if len(values) == 1:
        values = values * rank
    if len(values) != rank:
        raise InvalidSpecError(f"--{name} has {len(values)} values, the input has {rank} spatial axes")
    return tuple(int(v) for v in values)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load_config_file(path) -> dict:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


def build_config(args) -> tuple[PipelineConfig, dict]:
    """Config file values overridden by any flag given on the command line."""
    values = {}
    if getattr(args, "config", None):
        raw = _load_config_file(args.config)
        values.update({k.replace("-", "_"): v for k, v in raw.items()})
    for key in ("window", "step", "border", "border_weight", "sentinel", "chunk", "on_zero_coverage", "workers"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    for key in ("window", "step", "border", "chunk"):
        if isinstance(values.get(key), int):
            values[key] = [values[key]]
    known = set(PipelineConfig.__dataclass_fields__)
    unknown = set(values) - known - {"input", "labels", "plan", "out", "results"}
    if unknown:
        raise InvalidSpecError(f"unknown config keys: {sorted(unknown)}")
    return PipelineConfig(**{k: v for k, v in values.items() if k in known}), values


def _resolve(args, values: dict, key: str):
    flag = getattr(args, key, None)
    return flag if flag is not None else values.get(key)


def _required(args, values: dict, key: str):
    value = _resolve(args, values, key)
    if value is None:
        raise InvalidSpecError(f"missing required argument: {key}")
    return value


def _plan_summary(plan: PatchPlan) -> dict:
    counts = plan.axis_counts
    mean_cov, max_cov = 1.0, 1
    for extent, w, s in zip(plan.layout.spatial, plan.spec.window, plan.spec.step):
        pos = axis_positions(extent, w, s)
        cover = np.zeros(extent, dtype=np.int64)
        for p in pos:
            cover[p:p + w] += 1
        mean_cov *= float(cover.mean())
        max_cov *= int(cover.max())
    return {
        "placements": len(plan),
        "axis_counts": list(counts),
        "windows_per_voxel_mean": mean_cov,
        "windows_per_voxel_max": max_cov,
    }


# commands


def cmd_plan(args) -> int:
    config, values = build_config(args)
    layout = TensorLayout.from_shape(open_volume(_required(args, values, "input")).shape)
    spec = config.validate(layout.rank)
    plan = build_plan(layout, spec)
    summary = _plan_summary(plan)
    out = _resolve(args, values, "out")
    if out:
        plan.save(out)
        summary["plan"] = str(out)
    print(f"placements: {summary['placements']}")
    print("positions per axis: " + " x ".join(str(c) for c in summary["axis_counts"]))
    print(f"windows per voxel: mean {summary['windows_per_voxel_mean']:.3f}, max {summary['windows_per_voxel_max']}")
    return EXIT_OK


def _get_plan(args, values, config: PipelineConfig, layout: TensorLayout) -> PatchPlan:
    plan_path = _resolve(args, values, "plan")
    if plan_path:
        plan = PatchPlan.load(plan_path)
        if plan.layout != layout:
            raise ShapeError(f"plan layout {plan.layout.shape} does not match input {layout.shape}")
        config.validate(layout.rank, need_window=False)
        return plan
    return build_plan(layout, config.validate(layout.rank))


def cmd_subsample(args) -> int:
    config, values = build_config(args)
    data = open_volume(_required(args, values, "input"))
    layout = TensorLayout.from_shape(data.shape)
    plan = _get_plan(args, values, config, layout)
    convention = config.convention()
    labels_path = _resolve(args, values, "labels")
    labels = open_volume(labels_path) if labels_path else None
    if labels is not None:
        lay = TensorLayout.from_shape(labels.shape)
        if lay.items != layout.items or lay.spatial != layout.spatial:
            raise ShapeError(f"label volume {lay.shape} does not match data volume {layout.shape}")
    out = Path(_resolve(args, values, "out") or "patches")
    if (out / "data").exists() or (out / "labels").exists():
        raise store.AlreadyExistsError(f"{out} already holds patch stores")

    if labels is None:
        arr = create_stack_store(out / "data", plan, len(plan), layout.channels)
        for i, patch in iter_patches(data, plan):
            arr.write_chunk((i, 0) + (0,) * layout.rank, patch[None])
        print(f"wrote {len(plan)} patches to {out / 'data'}")
        return EXIT_OK

    shell = border_mask(plan.spec.window, plan.spec.border)
    sentinel = np.float32(convention.unlabeled_sentinel)
    retained, in_retained = [], 0
    for i, patch in iter_patches(labels, plan):
        patch = np.array(patch, dtype=np.float32)
        patch[:, shell] = sentinel
        n = int(convention.labeled(patch).any(axis=0).sum())
        if n:
            retained.append(i)
            in_retained += n
    sub = plan.subset(retained)
    label_plan = PatchPlan(TensorLayout.from_shape(labels.shape), plan.spec, sub.placements)
    darr = create_stack_store(out / "data", sub, len(sub), layout.channels)
    larr = create_stack_store(out / "labels", label_plan, len(sub), labels.shape[1], fill_value=float(sentinel))
    origin = (0,) * layout.rank
    for j, p in enumerate(sub.placements):
        sl = (p.item, slice(None), *p.slices(plan.spec))
        darr.write_chunk((j, 0, *origin), np.asarray(data[sl], dtype=np.float32)[None])
        lab = np.array(labels[sl], dtype=np.float32)
        lab[:, shell] = sentinel
        larr.write_chunk((j, 0, *origin), lab[None])

    report = CurationReport(
        total_patches=len(plan),
        retained_patches=len(retained),
        retained_indices=retained,
        annotated_voxels_in_retained=in_retained,
    )
    if retained:
        report.annotated_voxels_unique = _unique_interior(plan, labels, retained, shell, convention)
        report.duplication_rate = in_retained / report.annotated_voxels_unique
    (out / "report.json").write_text(report.to_json())
    print(f"retained {report.retained_patches} of {report.total_patches} patches")
    if report.duplication_rate is not None:
        print(f"duplication rate: {report.duplication_rate:.4f}")
    return EXIT_OK


def _unique_interior(plan, labels, retained, shell, convention) -> int:
    seen = np.zeros((plan.layout.items, *plan.layout.spatial), dtype=bool)
    interior = ~shell
    for i in retained:
        p = plan.placements[i]
        sl = p.slices(plan.spec)
        hit = convention.labeled(np.asarray(labels[(p.item, slice(None), *sl)])).any(axis=0) & interior
        view = seen[(p.item, *sl)]
        view |= hit
    return int(seen.sum())


class _StoredResults:
    """Lazy sequence over a patch-result store, one patch per access."""

    def __init__(self, arr: store.ChunkedArray):
        self.arr = arr

    def __len__(self):
        return self.arr.shape[0]

    def __getitem__(self, i):
        return self.arr.read_region((i,) + (0,) * (self.arr.ndim - 1), (1, *self.arr.shape[1:]))[0]


def _run_stitch(plan, results_arr, config, out, resume) -> store.ChunkedArray:
    if results_arr.shape[2:] != plan.spec.window:
        raise ShapeError(f"result patches have window {results_arr.shape[2:]}, plan expects {plan.spec.window}")
    policy = config.policy(results_arr.shape[1])
    return stitch_stream(
        plan,
        _StoredResults(results_arr),
        policy,
        out,
        chunk_shape=config.chunk_shape(plan.spec.rank),
        workers=config.workers,
        resume=resume,
    )


def cmd_stitch(args) -> int:
    config, values = build_config(args)
    results = store.open_array(_required(args, values, "results"))
    plan_path = _resolve(args, values, "plan")
    if plan_path:
        plan = PatchPlan.load(plan_path)
    elif PLAN_ATTR in results.attrs:
        plan = PatchPlan.from_dict(results.attrs[PLAN_ATTR])
    else:
        raise InvalidSpecError("no --plan given and the results store records none")
    config.validate(plan.spec.rank, need_window=False)
    out = Path(_resolve(args, values, "out") or "stitched")
    output = _run_stitch(plan, results, config, out, args.resume)
    manifest = read_manifest(out)
    cov = manifest["coverage"]
    print(f"output: {output.root} shape={output.shape}")
    print(
        f"coverage: weight min {cov['min_weight']:.4g}, max {cov['max_weight']:.4g}, "
        f"zero-weight voxels {cov['zero_voxels']}"
    )
    return EXIT_OK


def _max_abs_error(volume, output: store.ChunkedArray, slab: int = 16) -> float:
    err = 0.0
    depth = output.shape[2]
    for item in range(output.shape[0]):
        for lo in range(0, depth, slab):
            hi = min(depth, lo + slab)
            a = np.asarray(volume[item, :, lo:hi], dtype=np.float32)
            b = output[item, :, lo:hi]
            err = max(err, float(np.abs(a - b).max()))
    return err


def cmd_roundtrip(args) -> int:
    config, values = build_config(args)
    data = open_volume(_required(args, values, "input"))
    layout = TensorLayout.from_shape(data.shape)
    spec = config.validate(layout.rank)
    plan = build_plan(layout, spec)
    out = _resolve(args, values, "out")
    with tempfile.TemporaryDirectory() as tmp:
        work = Path(out) if out else Path(tmp)
        patches = create_stack_store(work / "patches", plan, len(plan), layout.channels)
        for i, patch in iter_patches(data, plan):
            patches.write_chunk((i, 0) + (0,) * layout.rank, patch[None])
        output = _run_stitch(plan, patches, config, work / "stitched", resume=False)
        err = _max_abs_error(data, output)
    ok = err <= 1e-5
    print(f"placements: {len(plan)}")
    print(f"max abs error: {err:.3g}")
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_MISMATCH


def _describe_array(arr: store.ChunkedArray) -> list[str]:
    present = sum(1 for _ in arr.iter_chunk_indices() if arr.chunk_path(_).exists())
    lines = [
        f"chunked array: {arr.root}",
        f"  shape: {arr.shape}",
        f"  chunks: {arr.chunks} (grid {arr.metadata.grid}, {present} of {math.prod(arr.metadata.grid)} written)",
        f"  dtype: {arr.dtype.str}  fill_value: {arr.metadata.fill_value}",
    ]
    attrs = arr.attrs
    if PLAN_ATTR in attrs:
        lines.append(f"  plan: {len(attrs[PLAN_ATTR]['placements'])} placements")
    return lines


def _describe_doc(doc: dict) -> list[str]:
    fmt = doc.get("format")
    if fmt == PLAN_FORMAT:
        plan = PatchPlan.from_dict(doc)
        s = plan.spec
        return [
            f"plan: {len(plan)} placements over {plan.layout.shape}",
            f"  positions per axis: {' x '.join(map(str, plan.axis_counts))}",
            f"  window {s.window} step {s.step} border {s.border} border_weight {s.border_weight}",
        ]
    if fmt == REPORT_FORMAT:
        rep = CurationReport.from_dict(doc)
        return [
            f"curation report: retained {rep.retained_patches} of {rep.total_patches} patches",
            f"  annotated voxels: {rep.annotated_voxels_unique} unique, {rep.annotated_voxels_in_retained} in retained",
            f"  duplication rate: {rep.duplication_rate}",
        ]
    if fmt == MANIFEST_FORMAT:
        return [
            f"stitch manifest: state {doc['state']}, {doc['accumulated']} of {doc['total']} patches accumulated",
            f"  output layout: {tuple(doc['layout'])}  chunk shape: {tuple(doc['chunk_shape'])}",
        ]
    raise UnrecognizedArtifactError(f"unknown document format {fmt!r}")


def cmd_info(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise FileNotFoundError(f"no such path: {path}")
    if store.is_array(path):
        lines = _describe_array(store.open_array(path))
    elif path.is_dir() and (path / MANIFEST).is_file():
        lines = _describe_doc(read_manifest(path))
    elif path.is_file() and sidecar_path(path).is_file():
        vol = open_volume(path)
        lines = [f"raw volume: {path}", f"  shape (N, C, spatial...): {tuple(vol.shape)}"]
    elif path.is_file():
        try:
            doc = json.loads(path.read_text())
        except (json.JSONDecodeError, UnicodeDecodeError):
            raise UnrecognizedArtifactError(f"{path} is not a recognized artifact") from None
        if not isinstance(doc, dict):
            raise UnrecognizedArtifactError(f"{path} is not a recognized artifact")
        lines = _describe_doc(doc)
    else:
        raise UnrecognizedArtifactError(f"{path} is not a recognized artifact")
    print("\n".join(lines))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tessellate", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def spec_flags(p, stitch=False):
        p.add_argument("--config", help="JSON or TOML config; flags override its values")
        p.add_argument("--window", type=_int_list, help="Z,Y,X (or a single value for all axes)")
        p.add_argument("--step", type=_int_list, help="Z,Y,X stride; defaults to the window")
        p.add_argument("--border", type=_int_list)
        p.add_argument("--border-weight", type=float)
        p.add_argument("--sentinel", type=float, help="label code for unannotated voxels (default -1)")
        if stitch:
            p.add_argument("--chunk", type=_int_list, help="spatial chunk shape of the accumulators")
            p.add_argument("--on-zero-coverage", help="'error' (default) or 'fill:V'")
            p.add_argument("--workers", type=int, help="threads for the final division")
        p.add_argument("--out")

    p = sub.add_parser("plan", help="compute window placements")
    p.add_argument("input", nargs="?")
    spec_flags(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("subsample", help="cut a volume (and optional labels) into patches")
    p.add_argument("input", nargs="?")
    p.add_argument("--labels")
    p.add_argument("--plan")
    spec_flags(p)
    p.set_defaults(func=cmd_subsample)

    p = sub.add_parser("stitch", help="reassemble patch results into a volume")
    p.add_argument("results", nargs="?")
    p.add_argument("--plan")
    p.add_argument("--resume", action="store_true", help="continue an interrupted stitch at --out")
    spec_flags(p, stitch=True)
    p.set_defaults(func=cmd_stitch)

    p = sub.add_parser("roundtrip", help="subsample and stitch with an identity model, compare")
    p.add_argument("input", nargs="?")
    spec_flags(p, stitch=True)
    p.set_defaults(func=cmd_roundtrip)

    p = sub.add_parser("info", help="describe a store, plan, report or manifest")
    p.add_argument("path")
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (InvalidSpecError, ShapeError, UndefinedStatisticError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except CoverageError as exc:
        print(f"coverage error: {exc}", file=sys.stderr)
        return EXIT_COVERAGE
    except IncompleteInputError as exc:
        print(f"incomplete input: {exc}", file=sys.stderr)
        return EXIT_INCOMPLETE
    except (OSError, FormatError, TessellateError, IndexError, KeyError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
