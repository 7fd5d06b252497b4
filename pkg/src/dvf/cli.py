"""``dvf`` command suite: synth, preprocess, train, embed, eval, retrieve, ablate, viz-tokens."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import statistics
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import torch

from dvf import __version__
from dvf.config import RunConfig, load_config
from dvf.dataset import DatasetManifest, build_manifest, load_rgb, resize_crop, to_tensor
from dvf.detector import cached, fixture_provider, http_provider
from dvf.errors import ConfigurationError, DVFError
from dvf.model import build_model, load_checkpoint, load_pretrained_encoder
from dvf.ovf import apply_ovf
from dvf.retrieval import EmbeddingStore, EvalReport, embed_corpus, format_table, recall_at_k, search
from dvf.svf import SemanticFilter, export_selection, render_overlay
from dvf.synth import SynthConfig, generate
from dvf.training import train

log = logging.getLogger("dvf")

TOGGLES = ("ovf", "svf", "dmt", "importance_generator")
CHECKPOINT = "checkpoint.dvfc"
STORE = "embeddings.dvfe"
MANIFEST = "manifest.json"
PROCESSED = "processed"
CROP_MANIFEST = "crop_manifest.json"
PROGRESS = "preprocess_progress.jsonl"


# ---------------------------------------------------------------- helpers


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_run_snapshot(cfg: RunConfig, command: str, argv: Sequence[str], extra: dict | None = None) -> Path:
    """Merge this command's snapshot into ``<output_dir>/run.json``."""
    path = _out(cfg) / "run.json"
    runs = json.loads(path.read_text()) if path.is_file() else {}
    runs[command] = {"version": __version__, "argv": list(argv), "config": cfg.to_json(), **(extra or {})}
    path.write_text(json.dumps(runs, indent=1, sort_keys=True))
    return path


def make_provider(cfg: RunConfig):
    sec = cfg.ovf
    if sec.provider == "fixture":
        provider = fixture_provider(sec.fixtures)
    elif sec.provider == "http":
        if not sec.endpoint:
            raise ConfigurationError("ovf.provider = 'http' needs ovf.endpoint")
        provider = http_provider(sec.endpoint, sec.timeout)
    else:
        raise ConfigurationError(f"unknown ovf.provider {sec.provider!r}; use 'fixture' or 'http'")
    return cached(provider, sec.cache_dir) if sec.cache_dir else provider


def _prompt(cfg: RunConfig) -> str:
    return cfg.ovf.prompt or cfg.dataset.meta_category


def data_root(cfg: RunConfig) -> Path:
    """Image tree training reads from: the OVF output when OVF is on, the raw corpus otherwise."""
    if not cfg.ovf.enabled:
        return Path(cfg.dataset.root)
    processed = Path(cfg.output_dir) / PROCESSED
    if not (Path(cfg.output_dir) / CROP_MANIFEST).is_file():
        raise ConfigurationError(
            f"OVF is enabled but {processed} is incomplete; run `dvf preprocess` first or set ovf.enabled=false"
        )
    return processed


def _manifest(cfg: RunConfig, root: Path) -> DatasetManifest:
    d = cfg.dataset
    return build_manifest(root, d.split_mode, d.fraction, d.meta_category)


def _load_manifest(cfg: RunConfig) -> DatasetManifest:
    path = Path(cfg.output_dir) / MANIFEST
    if not path.is_file():
        raise ConfigurationError(f"{path} not found; run `dvf train` first")
    return DatasetManifest.load(path)


def _load_model(cfg: RunConfig, checkpoint: str | None):
    path = Path(checkpoint) if checkpoint else Path(cfg.output_dir) / CHECKPOINT
    if not path.is_file():
        raise ConfigurationError(f"checkpoint {path} not found; run `dvf train` first or pass --checkpoint")
    return load_checkpoint(path)


def _eval_tensor(image, model) -> torch.Tensor:
    crop = resize_crop(image, False, crop_size=model.cfg.encoder.image_size)
    dtype = next(model.parameters()).dtype
    return to_tensor(crop).unsqueeze(0).to(dtype), crop


# ---------------------------------------------------------------- pipeline stages


def preprocess_corpus(cfg: RunConfig, provider=None) -> dict:
    """Run OVF over every corpus image into ``<output_dir>/processed``; resumable via a progress file."""
    out = _out(cfg)
    src_root = Path(cfg.dataset.root)
    records = build_manifest(src_root, cfg.dataset.split_mode, cfg.dataset.fraction, validate_images=False).records
    provider = provider or make_provider(cfg)
    ovf_cfg = cfg.ovf.to_ovf()
    prompt = _prompt(cfg)
    progress_path = out / PROGRESS
    done: dict[str, dict] = {}
    if progress_path.is_file():
        for line in progress_path.read_text().splitlines():
            if line.strip():
                entry = json.loads(line)
                if (out / entry["output"]).is_file():
                    done[entry["id"]] = entry
    resumed = len(done)
    with progress_path.open("a") as fh:
        for rec in records:
            if rec.id in done:
                continue
            src = Path(rec.path)
            image = load_rgb(src)
            dets = provider.detect(image, prompt, rec.id)
            result, spec = apply_ovf(image, dets, ovf_cfg)
            if spec.used_detection:
                rel = Path(PROCESSED) / rec.id.split("/")[0] / f"{src.stem}.png"
                (out / rel).parent.mkdir(parents=True, exist_ok=True)
                result.save(out / rel)
            else:
                rel = Path(PROCESSED) / rec.id.split("/")[0] / src.name
                (out / rel).parent.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(src, out / rel)
            entry = {**spec.to_json(rec.id), "output": str(rel)}
            fh.write(json.dumps(entry) + "\n")
            fh.flush()
            done[rec.id] = entry
    entries = [done[r.id] for r in records]
    used = sum(e["used_detection"] for e in entries)
    summary = {
        "total": len(entries),
        "new": len(entries) - resumed,
        "resumed": resumed,
        "used_detection": used,
        "passthrough": len(entries) - used,
        "used_detection_rate": used / len(entries),
    }
    (out / CROP_MANIFEST).write_text(json.dumps({"summary": summary, "crops": entries}, indent=1))
    return summary


def train_run(cfg: RunConfig):
    """Build the manifest, train from the configured seed and write checkpoint + log + manifest."""
    out = _out(cfg)
    manifest = _manifest(cfg, data_root(cfg))
    manifest.save(out / MANIFEST)
    model = build_model(cfg.model.to_model(), cfg.train.seed)
    if cfg.model.pretrained:
        load_pretrained_encoder(model, cfg.model.pretrained)
    result = train(manifest, model, cfg.train.to_train(), out)
    return model, manifest, result


def embed_run(cfg: RunConfig, model, manifest: DatasetManifest, split: str = "test") -> EmbeddingStore:
    store = embed_corpus(manifest.split(split), model, cfg.eval.batch_size)
    store.save(Path(cfg.output_dir) / STORE)
    return store


def eval_run(cfg: RunConfig, store: EmbeddingStore) -> EvalReport:
    report = recall_at_k(store, cfg.eval.ks, config_snapshot=cfg.to_json())
    report.save(Path(cfg.output_dir) / "eval_report.json")
    return report


def variant_config(cfg: RunConfig, toggles: set[str], output_dir: Path, seed: int, k: int | None = None) -> RunConfig:
    """Apply an ablation toggle set to ``cfg``. Absent toggles are switched off.

    ``importance_generator`` implies token selection; ``dmt`` adds the augmentation
    policy and the contrastive term on top of plain ProxyNCA.
    """
    svf = "svf" in toggles or "importance_generator" in toggles
    model = replace(cfg.model, svf_enabled=svf, importance_enabled="importance_generator" in toggles)
    if k is not None:
        model = replace(model, k=k)
    dmt = "dmt" in toggles
    train_sec = replace(cfg.train, seed=seed, use_augmentation=dmt, use_contrastive=dmt)
    return replace(
        cfg,
        ovf=replace(cfg.ovf, enabled="ovf" in toggles),
        model=model,
        train=train_sec,
        output_dir=str(output_dir),
    )


def _variant_name(toggles: Sequence[str]) -> str:
    return "baseline" if not toggles else "baseline + " + " + ".join(toggles)


def _check_toggles(toggles) -> list[str]:
    unknown = set(toggles) - set(TOGGLES)
    if unknown:
        raise ConfigurationError(f"unknown toggles {sorted(unknown)}; choose from {list(TOGGLES)}")
    return [t for t in TOGGLES if t in toggles]


def ablate(
    cfg: RunConfig,
    toggles: Sequence[str],
    seeds: Sequence[int],
    k_sweep: Sequence[int] = (),
    provider=None,
    combos: Sequence[Sequence[str]] | None = None,
) -> dict:
    """Train and evaluate every variant for each seed.

    Variants are the baseline, each toggle alone and all toggles together, or the
    baseline plus explicit ``combos`` when given. Rows report the per-K median over
    seeds; per-seed values are kept in the JSON.
    """
    toggles = _check_toggles(toggles)
    out = _out(cfg)
    variants: list[tuple[str, set[str], int | None]] = [("baseline", set(), None)]
    if combos is not None:
        for combo in combos:
            combo = _check_toggles(combo)
            if combo:
                variants.append((_variant_name(combo), set(combo), None))
        toggles = _check_toggles({t for c in combos for t in c} | set(toggles))
    else:
        variants += [(_variant_name([t]), {t}, None) for t in toggles]
        if len(toggles) > 1:
            variants.append((_variant_name(toggles), set(toggles), None))
    for k in k_sweep:
        variants.append((f"k={k}", set(toggles) | {"svf"}, int(k)))

    shared = replace(cfg, output_dir=str(out))
    if any("ovf" in t for _, t, _ in variants):
        shared = replace(shared, ovf=replace(shared.ovf, enabled=True))
        preprocess_corpus(shared, provider)

    rows, per_seed = {}, {}
    for name, tset, k in variants:
        runs = []
        for seed in seeds:
            vdir = out / "variants" / name.replace(" ", "").replace("+", "_") / f"seed{seed}"
            vcfg = variant_config(shared, tset, vdir, seed, k)
            if vcfg.ovf.enabled:
                # reuse the shared OVF tree instead of preprocessing per variant
                vdir.mkdir(parents=True, exist_ok=True)
                vcfg = replace(vcfg, ovf=replace(vcfg.ovf, enabled=False), dataset=replace(vcfg.dataset, root=str(out / PROCESSED)))
            model, manifest, _ = train_run(vcfg)
            report = eval_run(vcfg, embed_run(vcfg, model, manifest))
            runs.append(report.recall_at)
            log.info("%s seed %d: %s", name, seed, report.recall_at)
        per_seed[name] = {str(s): {str(kk): v for kk, v in r.items()} for s, r in zip(seeds, runs)}
        rows[name] = {kk: statistics.median(r[kk] for r in runs) for kk in runs[0]}

    payload = {
        "toggles": toggles,
        "seeds": list(seeds),
        "rows": {n: {str(kk): v for kk, v in r.items()} for n, r in rows.items()},
        "per_seed": per_seed,
    }
    (out / "ablation.json").write_text(json.dumps(payload, indent=1))
    if k_sweep:
        curve = {
            "k": [int(k) for k in k_sweep],
            "recall_at": {f"k={k}": payload["rows"][f"k={k}"] for k in k_sweep},
        }
        (out / "k_sweep.json").write_text(json.dumps(curve, indent=1))
    return {"rows": rows, "payload": payload}


def viz_tokens(cfg: RunConfig, model, image_path: Path, out_dir: Path) -> dict:
    """Overlay of the selected patches plus selection JSON with and without the importance generator."""
    svf = model.svf if model.svf is not None else SemanticFilter(model.cfg.encoder.dim, model.cfg.k).to(
        next(model.parameters()).dtype
    )
    tensor, crop = _eval_tensor(load_rgb(image_path), model)
    grid = model.cfg.encoder.grid
    selections = {}
    was = svf.use_importance
    with torch.no_grad():
        for tag, flag in (("with_importance", True), ("without_importance", False)):
            svf.use_importance = flag
            _, diag = model.encoder.encode(tensor, svf)
            selections[tag] = diag["selection"]
    svf.use_importance = was
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = image_path.stem
    paths = {}
    for tag, sel in selections.items():
        png = out_dir / f"{stem}_{tag}.png"
        render_overlay(crop, sel.ids[0].tolist(), grid).save(png)
        export_selection(out_dir / f"{stem}_{tag}.json", sel)
        paths[tag] = str(png)
    summary = {tag: sel.to_json(0) for tag, sel in selections.items()}
    summary["same_ids"] = summary["with_importance"]["ids"] == summary["without_importance"]["ids"]
    (out_dir / f"{stem}_tokens.json").write_text(json.dumps(summary, indent=1))
    return {"overlays": paths, **summary}


# ---------------------------------------------------------------- commands


def cmd_synth(args, argv) -> int:
    cfg = SynthConfig(
        num_classes=args.classes,
        images_per_class=args.per_class,
        size=args.size,
        object_area=tuple(args.object_area),
        clutter=args.clutter,
        low_confidence_rate=args.low_confidence_rate,
        seed=args.seed,
    )
    counts = generate(args.out, cfg)
    print(f"wrote {counts['images']} images ({counts['low_confidence']} with low-confidence detections) under {args.out}")
    return 0


def cmd_preprocess(args, argv) -> int:
    cfg = _config(args)
    write_run_snapshot(cfg, "preprocess", argv)
    s = preprocess_corpus(cfg)
    print(
        f"preprocessed {s['total']} images ({s['new']} new, {s['resumed']} resumed): "
        f"{s['used_detection']} cropped, {s['passthrough']} passthrough, "
        f"used_detection rate {s['used_detection_rate']:.3f}"
    )
    return 0


def cmd_train(args, argv) -> int:
    cfg = _config(args)
    write_run_snapshot(cfg, "train", argv)
    _, manifest, result = train_run(cfg)
    print(f"trained on {len(manifest.split('train'))} images for {len(result.losses)} steps; checkpoint {result.checkpoint}")
    return 0


def cmd_embed(args, argv) -> int:
    cfg = _config(args)
    write_run_snapshot(cfg, "embed", argv)
    model, _, _ = _load_model(cfg, args.checkpoint)
    store = embed_run(cfg, model, _load_manifest(cfg), args.split)
    print(f"embedded {len(store)} {args.split} images -> {Path(cfg.output_dir) / STORE}")
    return 0


def cmd_eval(args, argv) -> int:
    cfg = _config(args)
    write_run_snapshot(cfg, "eval", argv)
    store = EmbeddingStore.load(Path(cfg.output_dir) / STORE)
    report = eval_run(cfg, store)
    for note in report.warnings:
        print(f"warning: {note}", file=sys.stderr)
    print(format_table({args.name: report.recall_at}, cfg.eval.ks))
    return 0


def cmd_retrieve(args, argv) -> int:
    cfg = _config(args)
    write_run_snapshot(cfg, "retrieve", argv)
    model, _, _ = _load_model(cfg, args.checkpoint)
    store = EmbeddingStore.load(Path(cfg.output_dir) / STORE)
    path = Path(args.query)
    query_id = args.query_id or f"{path.parent.name}/{path.stem}"
    image = load_rgb(path)
    processed = (Path(cfg.output_dir) / PROCESSED).resolve()
    if cfg.ovf.enabled and processed not in path.resolve().parents:
        image, _ = apply_ovf(image, make_provider(cfg).detect(image, _prompt(cfg), query_id), cfg.ovf.to_ovf())
    tensor, _ = _eval_tensor(image, model)
    with torch.no_grad():
        vec = model(tensor)[0].double().numpy()
    for rank, (rid, sim) in enumerate(search(store, vec, args.top_k, exclude_id=query_id), 1):
        print(f"{rank}\t{rid}\t{sim:.6f}")
    return 0


def cmd_ablate(args, argv) -> int:
    cfg = _config(args)
    write_run_snapshot(cfg, "ablate", argv)
    seeds = args.seeds if args.seeds else [cfg.train.seed]
    result = ablate(cfg, args.toggles, seeds, args.k_sweep)
    print(format_table(result["rows"], cfg.eval.ks))
    return 0


def cmd_viz_tokens(args, argv) -> int:
    cfg = _config(args)
    write_run_snapshot(cfg, "viz-tokens", argv)
    model, _, _ = _load_model(cfg, args.checkpoint)
    summary = viz_tokens(cfg, model, Path(args.image), Path(cfg.output_dir) / "viz")
    print(f"with importance: {summary['with_importance']['ids']}")
    print(f"without importance: {summary['without_importance']['ids']}")
    return 0


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if args.output_dir:
        overrides.append(f'output_dir="{args.output_dir}"')
    return load_config(args.config, args.preset, overrides)


def _csv(kind):
    def parse(text: str):
        return [kind(t) for t in text.split(",") if t.strip()]

    return parse


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dvf", description="Dual visual filtering for fine-grained retrieval.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--preset", default="paper", help="defaults to start from: paper (default) or toy")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    common.add_argument("--output-dir", help="shorthand for --set output_dir=...")

    p = sub.add_parser("synth", help="generate the synthetic shape/texture corpus")
    p.add_argument("out")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--object-area", type=float, nargs=2, default=(0.2, 0.4), metavar=("MIN", "MAX"))
    p.add_argument("--clutter", type=int, default=12)
    p.add_argument("--low-confidence-rate", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", parents=[common], help="object-oriented filtering of the corpus")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="train encoder, token filter and proxies")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", parents=[common], help="embed a split into the embedding store")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", parents=[common], help="Recall@K over the embedding store")
    p.add_argument("--name", default="DVF", help="row label in the printed table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("retrieve", parents=[common], help="top-K neighbours of a query image")
    p.add_argument("query")
    p.add_argument("--top-k", type=int, default=8)
    p.add_argument("--query-id", help="store id of the query (default: <parent dir>/<stem>)")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("ablate", parents=[common], help="component ablation and k sweep")
    p.add_argument("--toggles", type=_csv(str), default=[], help=f"comma list from {','.join(TOGGLES)}")
    p.add_argument("--k-sweep", type=_csv(int), default=[])
    p.add_argument("--seeds", type=_csv(int), default=[])
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("viz-tokens", parents=[common], help="render the selected tokens for one image")
    p.add_argument("image")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_viz_tokens)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except DVFError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
