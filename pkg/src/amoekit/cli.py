"""``amoekit`` command line: one subcommand per pipeline stage.

Every command takes ``--config FILE`` (flat JSON object) whose keys are the
long option names with dashes replaced by underscores; explicit flags win
over the file. The fully resolved configuration is written next to the
outputs as ``config.resolved.json``.

Exit codes: 0 ok, 1 I/O or file-format error, 2 validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, analysis, curation, distill_loss, evalkit, formats, kernels, packer, phis, rope
from .core import AmoeError, FormatError, ImageTokenRecord, TeacherConfig, ValidationError

log = logging.getLogger("amoekit")

# Keys that control where/how a run executes, not what it computes.
_EXECUTION_KEYS = {"out", "threads", "config", "command", "log_level"}

DEFAULTS = {
    "pack": dict(manifest=None, ids=None, c_max=2600, extra_tokens=5, max_images=16, patch_size=16,
                 num_ranks=1, seed=0, segments=True),
    "blend": dict(spec=None, total=None, patch_size=16, seed=0),
    "phis": dict(action=None, input=[], transform=None, threshold=0.5, skip_flagged=True, seed=0),
    "curate": dict(shard=[], ids_file=[], level_ks="1000,100,20,5", target_n=None, max_iters=100,
                   n_init=4, fit_sample=None, normalize=False, seed=0),
    "loss": dict(features=None, plan=None, beta=1.0, arkd="on", eps=1e-8, seed=0),
    "eval": dict(task=None, train=[], query=[], gallery=[], scores=[], train_labels=None,
                 query_labels=None, truth=None, k=20, vote_temperature=0.07, tau=1.0, gamma=1.0,
                 zscore=False, seed=0),
    "cka": dict(manifest=None, clip_lo=-10.0, clip_hi=10.0, clip=True, seed=0),
    "rope": dict(width=256, height=256, patch_size=16, num_pairs=16, seed_angle=0.0, base=100.0, seed=0),
}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="flat JSON file of option values")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, default=1, help="worker threads (outputs do not depend on it)")
    common.add_argument("--log-level", default="INFO")

    p = argparse.ArgumentParser(prog="amoekit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__} ({kernels.BACKEND} kernels)")
    sub = p.add_subparsers(dest="command", required=True)
    sp = dict(parents=[common], argument_default=argparse.SUPPRESS)

    s = sub.add_parser("pack", help="token-balanced packing of an image manifest", **sp)
    s.add_argument("--manifest", help="JSONL with id, width, height")
    s.add_argument("--ids", help="optional newline-delimited id list restricting the manifest")
    s.add_argument("--c-max", type=int)
    s.add_argument("--extra-tokens", type=int, help="CLS + register tokens per image")
    s.add_argument("--max-images", type=int)
    s.add_argument("--patch-size", type=int)
    s.add_argument("--num-ranks", type=int)
    s.add_argument("--no-segments", dest="segments", action="store_false")

    s = sub.add_parser("blend", help="multi-resolution blend manifest", **sp)
    s.add_argument("--spec", help="JSON with pools and targets")
    s.add_argument("--total", type=int, help="number of items (default: all eligible images)")
    s.add_argument("--patch-size", type=int)

    s = sub.add_parser("phis", help="fit/apply/invert/diagnose PHI-S transforms", **sp)
    s.add_argument("action", choices=["fit", "apply", "invert", "diagnose"])
    s.add_argument("--input", action="append", help="[name=]path.emb; repeatable for fit/diagnose")
    s.add_argument("--transform", help="transform JSON (apply/invert)")
    s.add_argument("--threshold", type=float, help="multimodality flag threshold")
    s.add_argument("--no-skip-flagged", dest="skip_flagged", action="store_false",
                   help="fit streams even when flagged as multimodal")

    s = sub.add_parser("curate", help="hierarchical k-means curation and balanced sampling", **sp)
    s.add_argument("--shard", action="append", help=".emb shard; repeatable")
    s.add_argument("--ids-file", action="append", help="ids for the matching shard (default shard:row)")
    s.add_argument("--level-ks", help="comma-separated, strictly decreasing")
    s.add_argument("--target-n", type=int)
    s.add_argument("--max-iters", type=int)
    s.add_argument("--n-init", type=int)
    s.add_argument("--fit-sample", type=int, help="learn the tree on a uniform subsample of this size")
    s.add_argument("--normalize", action="store_true", help="L2-normalize embeddings first")

    s = sub.add_parser("loss", help="distillation losses for a features manifest", **sp)
    s.add_argument("--features", help="features manifest JSON")
    s.add_argument("--plan", help="packing plan JSON grouping the images into ranks/sequences")
    s.add_argument("--beta", type=float, help="smooth-L1 transition point")
    s.add_argument("--arkd", choices=["on", "off", "symmetric"])
    s.add_argument("--eps", type=float)

    s = sub.add_parser("eval", help="kNN / retrieval / score-ensemble evaluation", **sp)
    s.add_argument("task", choices=["knn", "retrieval", "ensemble"])
    s.add_argument("--train", action="append", help="train embeddings per head (knn)")
    s.add_argument("--query", action="append", help="query embeddings per head (knn, retrieval)")
    s.add_argument("--gallery", action="append", help="gallery embeddings per head (retrieval)")
    s.add_argument("--scores", action="append", help="score matrix per head (ensemble)")
    s.add_argument("--train-labels")
    s.add_argument("--query-labels")
    s.add_argument("--truth", help="ground-truth labels or gallery indices")
    s.add_argument("-k", "--k", type=int)
    s.add_argument("--vote-temperature", type=float)
    s.add_argument("--tau", type=float)
    s.add_argument("--gamma", type=float)
    s.add_argument("--zscore", action="store_true", help="standardize each head's scores before fusion")

    s = sub.add_parser("cka", help="expert/teacher-layer linear CKA matrix", **sp)
    s.add_argument("--manifest", help="routed-token manifest JSON")
    s.add_argument("--clip-lo", type=float)
    s.add_argument("--clip-hi", type=float)
    s.add_argument("--no-clip", dest="clip", action="store_false")

    s = sub.add_parser("rope", help="normalized rotary coordinates and phases", **sp)
    s.add_argument("--width", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--patch-size", type=int)
    s.add_argument("--num-pairs", type=int)
    s.add_argument("--seed-angle", type=float)
    s.add_argument("--base", type=float)
    return p


def resolve_config(command: str, given: dict) -> dict:
    cfg = dict(DEFAULTS[command])
    if "config" in given:
        data = formats.read_json(given["config"])
        if not isinstance(data, dict):
            raise FormatError(f"{given['config']}: config must be a JSON object")
        unknown = set(data) - set(cfg)
        if unknown:
            raise ValidationError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(data)
    cfg.update({k: v for k, v in given.items() if k not in _EXECUTION_KEYS})
    return cfg


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, [])]
    if missing:
        raise ValidationError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _rel(base: Path, p: str) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


# --- commands ------------------------------------------------------------------


def cmd_pack(cfg: dict, out: Path, threads: int) -> None:
    _require(cfg, "manifest")
    images = formats.read_manifest(cfg["manifest"], cfg["patch_size"])
    if cfg.get("ids"):
        keep = formats.read_ids(cfg["ids"])
        by_id = {img.id: img for img in images}
        missing = [i for i in keep if i not in by_id]
        if missing:
            raise ValidationError(f"{len(missing)} ids not in manifest, e.g. {missing[0]!r}")
        images = [by_id[i] for i in keep]
    pcfg = packer.PackerConfig(cfg["c_max"], cfg["extra_tokens"], cfg["max_images"])
    plan = packer.plan_packing(images, pcfg, cfg["seed"])
    packer.validate_plan(plan, pcfg, images)
    view = packer.partition_across_ranks(plan, cfg["num_ranks"])
    rank_of = {}
    for r, rank in enumerate(view.per_rank_sequences):
        for seq in rank:
            rank_of[id(seq)] = r
    ranks = [rank_of[id(seq)] for seq in plan.sequences]
    formats.write_json(out / "plan.json", formats.plan_to_dict(plan, pcfg, ranks, cfg["segments"]))
    stats = packer.padding_stats(plan, pcfg)
    naive = packer.padding_stats(packer.singleton_plan(images, pcfg), pcfg)
    stats.update(
        num_images=len(images),
        num_ranks=cfg["num_ranks"],
        rank_loads=view.rank_loads(),
        singleton_padding_fraction=naive["padding_fraction"],
    )
    formats.write_json(out / "stats.json", stats)
    log.info("packed %d images into %d sequences (padding %.4f)", len(images), stats["num_sequences"],
             stats["padding_fraction"])


def cmd_blend(cfg: dict, out: Path, threads: int) -> None:
    _require(cfg, "spec")
    spec_path = Path(cfg["spec"])
    spec = formats.read_json(spec_path)
    try:
        pools = [
            packer.ResolutionPool(
                p["name"],
                tuple(formats.read_manifest(_rel(spec_path.parent, p["manifest"]), cfg["patch_size"])),
                tuple(p.get("native_resolution_range", (1, 1 << 30))),
            )
            for p in spec["pools"]
        ]
        targets = [packer.BlendTarget(t["pool"], int(t["resolution_cap"]), float(t["weight"]))
                   for t in spec["targets"]]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{spec_path}: malformed blend spec ({exc})") from None
    items = packer.plan_multires_blend(pools, targets, cfg["total"], cfg["seed"])
    seen: dict[str, int] = {}
    rows = []
    for it in items:
        key = f"{it.pool}/{it.image_id}@{it.resolution_cap}"
        n = seen.get(key, 0)
        seen[key] = n + 1
        rows.append({"id": key if n == 0 else f"{key}#{n}", "source_id": it.image_id, "width": it.width,
                     "height": it.height, "pool": it.pool, "resolution_cap": it.resolution_cap})
    formats.write_jsonl(out / "blend.jsonl", rows)
    counts: dict[str, int] = {}
    for it in items:
        k = f"{it.pool}@{it.resolution_cap}"
        counts[k] = counts.get(k, 0) + 1
    formats.write_json(out / "blend_stats.json", {"total": len(items), "per_target": counts})


def _named_inputs(values: list[str]) -> list[tuple[str, Path]]:
    out = []
    for v in values:
        name, sep, path = v.partition("=")
        if not sep:
            name, path = Path(v).stem, v
        out.append((name, Path(path)))
    names = [n for n, _ in out]
    if len(set(names)) != len(names):
        raise ValidationError("input stream names must be unique")
    return out


def cmd_phis(cfg: dict, out: Path, threads: int) -> None:
    _require(cfg, "action", "input")
    action = cfg["action"]
    inputs = _named_inputs(cfg["input"])
    if action in ("fit", "diagnose"):
        report = {}
        for name, path in inputs:
            x = formats.read_emb(path)
            diag = phis.multimodality_score(x, cfg["threshold"])
            entry = {"score": diag.score, "split_ratio": diag.split_ratio, "flagged": diag.flagged}
            if action == "fit":
                if diag.flagged and cfg["skip_flagged"]:
                    entry["fitted"] = False
                    log.warning("stream %s looks multimodal (score %.3f); left untransformed", name, diag.score)
                else:
                    t = phis.fit_phis(phis.estimate_moments(x))
                    phis.save_transform(t, out / f"{name}.phis.json")
                    entry.update(fitted=True, transform=f"{name}.phis.json", scale=t.scale,
                                 hadamard=phis.hadamard_construction(t.dim), samples=x.shape[0])
            report[name] = entry
        formats.write_json(out / ("phis_fit.json" if action == "fit" else "diagnose.json"),
                      {"threshold": cfg["threshold"], "streams": report})
        return
    _require(cfg, "transform")
    t = phis.load_transform(cfg["transform"])
    fn = phis.apply_phis if action == "apply" else phis.invert_phis
    suffix = "phis" if action == "apply" else "inv"
    for name, path in inputs:
        formats.write_emb(out / f"{name}.{suffix}.emb", fn(t, formats.read_emb(path), threads))


def cmd_curate(cfg: dict, out: Path, threads: int) -> None:
    _require(cfg, "shard", "target_n")
    level_ks = [int(k) for k in str(cfg["level_ks"]).split(",") if k.strip()]
    shards = [Path(s) for s in cfg["shard"]]
    id_files = cfg.get("ids_file") or []
    if id_files and len(id_files) != len(shards):
        raise ValidationError("give one --ids-file per --shard, or none")
    mats, ids = [], []
    for i, shard in enumerate(shards):
        m = formats.read_emb(shard)
        mats.append(m)
        if id_files:
            shard_ids = formats.read_ids(id_files[i])
            if len(shard_ids) != m.shape[0]:
                raise ValidationError(f"{id_files[i]} has {len(shard_ids)} ids for {m.shape[0]} rows")
        else:
            shard_ids = [f"{shard.stem}:{r}" for r in range(m.shape[0])]
        ids.extend(shard_ids)
    if len(set(ids)) != len(ids):
        raise ValidationError("point ids must be unique across shards")
    points = np.concatenate(mats) if mats else np.zeros((0, 0), np.float32)
    fit_points = points
    if cfg.get("fit_sample") and cfg["fit_sample"] < points.shape[0]:
        rng = np.random.default_rng(cfg["seed"])
        fit_points = points[np.sort(rng.choice(points.shape[0], cfg["fit_sample"], replace=False))]
    tree = curation.build_hierarchy(fit_points, level_ks, cfg["max_iters"], cfg["seed"], cfg["normalize"],
                                    threads, cfg["n_init"])
    table = curation.assign(points, tree, ids, threads, cfg["normalize"])
    sample = curation.hierarchical_sample(tree, table, cfg["target_n"], cfg["seed"])
    formats.write_ids(out / "sampled_ids.txt", sample)
    formats.write_assignments(out / "assignments.u32", table.ids, table.leaf, tree.level_sizes[0])
    levels = []
    for depth, lvl in enumerate(tree.levels):
        fname = f"tree_level{depth + 1}.emb"
        formats.write_emb(out / fname, lvl.centroids)
        levels.append({"level": depth + 1, "size": int(lvl.centroids.shape[0]), "centroids": fname,
                       "parent_of": None if lvl.parent_of is None else lvl.parent_of.tolist(),
                       "inertia_history": list(tree.inertia_histories[depth])})
    leaf_counts = np.bincount(table.leaf, minlength=tree.level_sizes[0])
    formats.write_json(out / "tree.json", {"level_sizes": tree.level_sizes, "levels": levels,
                                      "leaf_population": leaf_counts.tolist()})
    log.info("sampled %d of %d points over %s", len(sample), len(ids), tree.level_sizes)


def _load_features(path: Path):
    spec = formats.read_json(path)
    base = path.parent
    try:
        images = spec["images"]
        ntok = [int(im["num_tokens"]) for im in images]
        image_ids = [str(im["id"]) for im in images]
        teachers = []
        for t in spec["teachers"]:
            tc = TeacherConfig(t["name"], int(t["summary_dim"]), int(t["patch_dim"]),
                               int(t.get("num_registers", 0)), bool(t.get("has_register_loss", False)))
            files = {k: formats.read_emb(_rel(base, t[k])) for k in
                     ("teacher_summary", "student_summary", "teacher_patches", "student_patches")}
            for k in ("teacher_registers", "student_registers"):
                files[k] = formats.read_emb(_rel(base, t[k])) if t.get(k) else None
            teachers.append((tc, files))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed features manifest ({exc})") from None
    b = len(images)
    offsets = np.concatenate([[0], np.cumsum(ntok)])
    per_teacher = []
    for tc, f in teachers:
        if f["teacher_summary"].shape[0] != b or f["teacher_patches"].shape[0] != offsets[-1]:
            raise ValidationError(f"teacher {tc.name!r}: feature rows do not match the image list")
        feats = []
        for q in range(b):
            kw = {}
            if f["teacher_registers"] is not None:
                k = tc.num_registers
                kw = dict(teacher_registers=f["teacher_registers"][q * k:(q + 1) * k],
                          student_registers=f["student_registers"][q * k:(q + 1) * k])
            sl = slice(offsets[q], offsets[q + 1])
            feats.append(distill_loss.PerImageFeatures(
                f["teacher_summary"][q], f["student_summary"][q],
                f["teacher_patches"][sl], f["student_patches"][sl], **kw))
        per_teacher.append((tc, feats))
    return image_ids, per_teacher


def cmd_loss(cfg: dict, out: Path, threads: int) -> None:
    _require(cfg, "features")
    image_ids, per_teacher = _load_features(Path(cfg["features"]))
    grouping = None
    if cfg.get("plan"):
        plan, _, rank_of = formats.plan_from_dict(formats.read_json(cfg["plan"]))
        index = {img: i for i, img in enumerate(image_ids)}
        if sorted(plan.image_ids()) != sorted(image_ids):
            raise ValidationError("plan and features manifest cover different images")
        rank_of = rank_of or [0] * len(plan.sequences)
        grouping = [[] for _ in range(max(rank_of) + 1 if rank_of else 1)]
        for seq, r in zip(plan.sequences, rank_of):
            grouping[r].append([index[e.image_id] for e in seq.entries])
    sl1 = distill_loss.SmoothL1Config(cfg["beta"])
    report = {}
    for tc, feats in per_teacher:
        report[tc.name] = distill_loss.teacher_losses(feats, tc, grouping, cfg["arkd"], sl1)
    total = distill_loss.total_loss({k: v["objective"] for k, v in report.items()})
    formats.write_json(out / "loss_report.json", {"teachers": report, "total": total,
                                             "b_global": len(image_ids)})
    log.info("total loss %.9g over %d images", total, len(image_ids))


def _fused_results(heads: list[np.ndarray], truth, metric: str, cfg: dict) -> list[dict]:
    score_fn = evalkit.top1_accuracy if metric == "top1" else evalkit.recall_at_1
    results = [{"metric": metric, "head": f"head{i}", "value": score_fn(h, truth)} for i, h in enumerate(heads)]
    if len(heads) > 1:
        fuse = evalkit.zscore_heads(heads) if cfg["zscore"] else heads
        ecfg = evalkit.EnsembleConfig(cfg["tau"], cfg["gamma"])
        w = evalkit.entropy_weights(fuse, ecfg)
        fused = evalkit.ensemble_scores(fuse, w)
        results.append({"metric": metric, "head": "ensemble", "value": score_fn(fused, truth),
                        "mean_weights": w.mean(axis=0).tolist()})
    return results


def cmd_eval(cfg: dict, out: Path, threads: int) -> None:
    _require(cfg, "task")
    task = cfg["task"]
    if task == "knn":
        _require(cfg, "train", "query", "train_labels", "query_labels")
        if len(cfg["train"]) != len(cfg["query"]):
            raise ValidationError("give one --query per --train (one pair per head)")
        train_labels = formats.read_labels(cfg["train_labels"])
        truth = formats.read_labels(cfg["query_labels"])
        n_cls = max(max(train_labels), max(truth)) + 1
        kcfg = evalkit.KnnConfig(cfg["k"], cfg["vote_temperature"])
        heads = [evalkit.knn_posteriors(formats.read_emb(tr), train_labels, formats.read_emb(q), kcfg, n_cls)
                 for tr, q in zip(cfg["train"], cfg["query"])]
        results = _fused_results(heads, truth, "top1", cfg)
    elif task == "retrieval":
        _require(cfg, "query", "gallery", "truth")
        if len(cfg["gallery"]) != len(cfg["query"]):
            raise ValidationError("give one --gallery per --query (one pair per head)")
        truth = formats.read_labels(cfg["truth"])
        heads = [evalkit.retrieval_scores(formats.read_emb(q), formats.read_emb(g))
                 for q, g in zip(cfg["query"], cfg["gallery"])]
        results = _fused_results(heads, truth, "recall@1", cfg)
    else:
        _require(cfg, "scores", "truth")
        truth = formats.read_labels(cfg["truth"])
        heads = [formats.read_emb(s).astype(np.float64) for s in cfg["scores"]]
        results = _fused_results(heads, truth, "top1", cfg)
    formats.write_json(out / "metrics.json", {"task": task, "results": results})


def cmd_cka(cfg: dict, out: Path, threads: int) -> None:
    _require(cfg, "manifest")
    path = Path(cfg["manifest"])
    spec = formats.read_json(path)
    try:
        sets = [
            analysis.RoutedTokenSet(
                str(e["expert_id"]),
                formats.read_emb(_rel(path.parent, e["student"])),
                {str(layer): formats.read_emb(_rel(path.parent, f)) for layer, f in e["layers"].items()},
                str(e.get("provenance", "")),
            )
            for e in spec["experts"]
        ]
    except (KeyError, TypeError, AttributeError) as exc:
        raise FormatError(f"{path}: malformed CKA manifest ({exc})") from None
    clip = (cfg["clip_lo"], cfg["clip_hi"]) if cfg["clip"] else None
    matrix, experts, layers = analysis.expert_teacher_alignment(sets, clip)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["expert"] + layers)
    for e, row in zip(experts, matrix):
        w.writerow([e] + [f"{v:.9g}" for v in row])
    (out / "cka.csv").write_text(buf.getvalue(), encoding="utf-8")


def cmd_rope(cfg: dict, out: Path, threads: int) -> None:
    grid = rope.normalized_grid(cfg["width"], cfg["height"], cfg["patch_size"])
    dirs = rope.golden_directions(cfg["num_pairs"], cfg["seed_angle"], cfg["base"])
    formats.write_emb(out / "grid.emb", grid.positions)
    formats.write_emb(out / "phases.emb", rope.rotary_phases(grid, dirs))
    formats.write_emb(out / "directions.emb", dirs.directions)
    formats.write_json(out / "rope.json", {"grid_h": grid.grid_h, "grid_w": grid.grid_w, "x_bound": grid.x_bound,
                                      "y_bound": grid.y_bound, "base_frequencies": dirs.base_frequencies})


COMMANDS = {
    "pack": cmd_pack,
    "blend": cmd_blend,
    "phis": cmd_phis,
    "curate": cmd_curate,
    "loss": cmd_loss,
    "eval": cmd_eval,
    "cka": cmd_cka,
    "rope": cmd_rope,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    given = vars(args)
    logging.basicConfig(level=getattr(logging, str(given.get("log_level", "INFO")).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    command = given["command"]
    threads = given.get("threads", 1)
    try:
        if threads < 1:
            raise ValidationError("--threads must be >= 1")
        cfg = resolve_config(command, given)
        out = Path(given["out"])
        out.mkdir(parents=True, exist_ok=True)
        formats.write_json(out / "config.resolved.json", {"command": command, **cfg})
        COMMANDS[command](cfg, out, threads)
    except AmoeError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
