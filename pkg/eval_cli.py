#!/usr/bin/env python3
"""
partint command line

    synth           generate the synthetic train/test annotation files
    train           train stage 1 (interactiveness) or stage 2 (verbs)
    eval            interactiveness AP / HOI mAP, per hard-case split, optional NIS
    bench-tokens    intuitive vs one-time-passing cross-attention token counts
    viz-attention   per-layer attention heatmaps for one image/proposal/part
    ablate          train and evaluate with masking or sampling switched off

Examples:
    python3 eval_cli.py synth --workers 4
    python3 eval_cli.py train --stage 1
    python3 eval_cli.py train --stage 2 --init runs/stage1.pt
    python3 eval_cli.py eval --split crowded --nis 0.1
    python3 eval_cli.py ablate --no-bodypart
"""

import argparse
import json
import statistics
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch
from PIL import Image

from attention_core import AttentionRecorder, EmptyMaskError, ShapeError, UnknownHeadError
from config import Config, ConfigError
from detection_pipeline import (
    CheckpointError,
    HOIDetector,
    MatchingError,
    SceneDataset,
    TrainingDivergedError,
    collate_scenes,
    model_from_checkpoint,
    predict,
    train,
)
from hoi_eval import (
    SPLITS,
    format_table,
    hoi_map,
    interactiveness_ap,
    part_ap,
    rows_to_csv,
    split_report,
    write_predictions,
)
from interactiveness_head import INTUITIVE, MERGED, count_attention_token_ops
from mask_geometry import BodyPart, MaskPolicyError, PART_NAMES
from scene_synth import (
    ProfileError,
    SchemaError,
    SynthProfile,
    generate_dataset,
    load_annotations,
    render_scene,
    save_annotations,
    tag_hard_cases,
)
from utils import configure_logging, get_logger, seed_everything

logger = get_logger("cli")

EXPECTED_ERRORS = (ConfigError, SchemaError, ProfileError, CheckpointError, MatchingError,
                   TrainingDivergedError, ShapeError, EmptyMaskError, MaskPolicyError,
                   UnknownHeadError, FileNotFoundError)

ABLATIONS = {
    'no_progressive': ('masks', 'progressive'),
    'no_bodypart': ('masks', 'bodypart'),
    'no_merge': ('masks', 'merge'),
    'no_sampler': ('train', 'sampler'),
}


# ============================================================================
# Helpers
# ============================================================================

def ablation_overrides(args: argparse.Namespace) -> Dict[str, Dict[str, Any]]:
    """Switch flags -> config overrides (each flag turns one feature off)"""
    overrides: Dict[str, Dict[str, Any]] = {}
    for flag, (section, key) in ABLATIONS.items():
        if getattr(args, flag, False):
            overrides.setdefault(section, {})[key] = False
    return overrides


def ablation_tag(args: argparse.Namespace) -> str:
    flags = [flag.replace('_', '-') for flag in ABLATIONS if getattr(args, flag, False)]
    return "+".join(flags) if flags else "full"


def load_config(args: argparse.Namespace, extra: Optional[Dict[str, Any]] = None) -> Config:
    overrides: Dict[str, Any] = {}
    if getattr(args, 'seed', None) is not None:
        overrides['train'] = {'seed': args.seed}
    for section, values in (extra or {}).items():
        overrides.setdefault(section, {}).update(values)
    return Config.load(config_path=args.config, overrides=overrides)


def data_path(config: Config, explicit: Optional[str], name: str) -> Path:
    if explicit:
        return Path(explicit)
    return config.get_absolute_path(config.paths.data_dir) / name


def run_path(config: Config, explicit: Optional[str]) -> Path:
    if explicit:
        return Path(explicit)
    return config.get_absolute_path(config.paths.run_dir)


def print_rows(title: str, rows, metric_name: str):
    print()
    print(title)
    print(format_table(rows, metric_name))


# ============================================================================
# Subcommands
# ============================================================================

def cmd_synth(args: argparse.Namespace, config: Config) -> int:
    profile = SynthProfile.from_config(config)
    out_dir = Path(args.out) if args.out else config.get_absolute_path(config.paths.data_dir)
    root_seed = args.root_seed if args.root_seed is not None else config.synth.root_seed
    num_train = args.train if args.train is not None else config.synth.num_train
    num_test = args.test if args.test is not None else config.synth.num_test

    train_scenes = generate_dataset(num_train, root_seed, profile, workers=args.workers)
    test_scenes = generate_dataset(num_test, root_seed, profile, workers=args.workers, offset=num_train)
    save_annotations(train_scenes, out_dir / "train.json")
    save_annotations(test_scenes, out_dir / "test.json")

    if args.images:
        image_dir = out_dir / "images"
        image_dir.mkdir(parents=True, exist_ok=True)
        for scene in train_scenes + test_scenes:
            Image.fromarray(render_scene(scene), "RGB").save(image_dir / f"{scene.id:06d}.png")

    crowded = sum(tag_hard_cases(s).crowded for s in train_scenes)
    print(f"✓ {num_train} train / {num_test} test scenes in {out_dir} "
          f"({crowded} crowded training scenes)")
    return 0


def cmd_train(args: argparse.Namespace, config: Config) -> int:
    scenes = load_annotations(data_path(config, args.data, "train.json"))
    run_dir = run_path(config, args.run_dir)
    init = args.init
    if args.stage == 2 and init is None and (run_dir / "stage1.pt").exists():
        init = run_dir / "stage1.pt"
    result = train(args.stage, scenes, config, run_dir=run_dir, init_checkpoint=init, epochs=args.epochs)
    final = result.history[-1]['losses'] if result.history else {}
    print(f"✓ Stage {args.stage} done: {result.checkpoint_path}")
    for key, value in sorted(final.items()):
        print(f"  {key}: {value:.4f}")
    return 0


def evaluate(config: Config, scenes, int_model: Optional[HOIDetector], verb_model: Optional[HOIDetector],
             nis_threshold: Optional[float] = None, splits: Sequence[str] = SPLITS,
             with_part_ap: bool = False, dump: Optional[List[Dict[str, Any]]] = None) -> Dict[str, Any]:
    """Predictions of both checkpoints and the per-split reports"""
    result: Dict[str, Any] = {}
    int_preds = verb_preds = None
    if int_model is not None:
        int_preds = predict(int_model, scenes, config, dump=dump)
        result['int_predictions'] = int_preds
        result['interactiveness'] = split_report(scenes, lambda s: interactiveness_ap(int_preds, s), splits)
        if with_part_ap:
            result['part_ap'] = part_ap(int_preds, scenes)
    if verb_model is not None:
        verb_preds = predict(verb_model, scenes, config)
        result['verb_predictions'] = verb_preds
        nms = config.eval.nms_threshold
        cap = config.eval.max_detections

        def metric(subset):
            return hoi_map(verb_preds, subset, int_preds, nis_threshold, nms, config.eval.match_iou, cap)[0]

        result['hoi'] = split_report(scenes, metric, splits)
    return result


def cmd_eval(args: argparse.Namespace, config: Config) -> int:
    scenes = load_annotations(data_path(config, args.data, "test.json"))
    run_dir = run_path(config, args.run_dir)
    int_ckpt = Path(args.int_checkpoint) if args.int_checkpoint else run_dir / "stage1.pt"
    verb_ckpt = Path(args.verb_checkpoint) if args.verb_checkpoint else run_dir / "stage2.pt"

    int_model = model_from_checkpoint(int_ckpt, config)[0] if int_ckpt.exists() else None
    verb_model = model_from_checkpoint(verb_ckpt, config)[0] if verb_ckpt.exists() else None
    if int_model is None and verb_model is None:
        raise CheckpointError(f"No checkpoint found ({int_ckpt}, {verb_ckpt}); run `train` first")

    nis = None
    if args.nis is not None:
        nis = config.eval.nis_threshold if args.nis == 'default' else float(args.nis)
        if not 0.0 <= nis <= 1.0:
            raise ConfigError(f"--nis must be in [0, 1], got {nis}")
        if int_model is None:
            raise CheckpointError("NIS needs the stage-1 checkpoint for interactiveness scores")

    splits = ["full", args.split] if args.split else list(SPLITS)
    dump: List[Dict[str, Any]] = []
    result = evaluate(config, scenes, int_model, verb_model, nis, splits, args.part_ap, dump)

    out_dir = Path(args.out) if args.out else run_dir / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    if 'interactiveness' in result:
        print_rows("Interactiveness AP", result['interactiveness'], "AP")
        (out_dir / "interactiveness.csv").write_text(rows_to_csv(result['interactiveness'], "ap"))
        write_predictions(result['int_predictions'], out_dir / "predictions_int.jsonl")
        (out_dir / "dump.json").write_text(json.dumps(dump, sort_keys=True))
    if 'hoi' in result:
        title = "HOI mAP" + (f" (NIS {nis})" if nis is not None else "")
        print_rows(title, result['hoi'], "mAP")
        (out_dir / "hoi.csv").write_text(rows_to_csv(result['hoi'], "map"))
        write_predictions(result['verb_predictions'], out_dir / "predictions_verb.jsonl")
    if 'part_ap' in result:
        print()
        print("Body-part interactiveness AP")
        for name, value in result['part_ap'].items():
            print(f"  {name:<6} {'n/a' if value is None else f'{value:.4f}'}")
    print(f"\nReports written to {out_dir}")
    return 0


@torch.no_grad()
def bench_tokens(model: HOIDetector, scenes, config: Config) -> List[Dict[str, Any]]:
    """Token-op counts of both schemes on each scene's predicted proposals"""
    model.eval()
    dataset = SceneDataset(scenes, config, train=False)
    depth = model.interactiveness.depth
    importance_depth = model.interactiveness.importance_depth
    rows = []
    for start in range(0, len(dataset), config.train.batch_size):
        batch = collate_scenes([dataset[i] for i in range(start, min(start + config.train.batch_size, len(dataset)))])
        out = model(batch['images'], batch['part_masks'], stage=1, mode=MERGED)
        for b, image_id in enumerate(batch['image_id']):
            stack = out.mask_stacks[b]
            intuitive = count_attention_token_ops(INTUITIVE, stack, None, depth)
            merged = count_attention_token_ops(MERGED, stack, out.interactiveness.selection[b], depth, importance_depth)
            rows.append({'image_id': image_id, 'intuitive': intuitive, 'merged': merged,
                         'ratio': merged / intuitive if intuitive else float('nan')})
    return rows


def cmd_bench_tokens(args: argparse.Namespace, config: Config) -> int:
    scenes = load_annotations(data_path(config, args.data, "test.json"))
    if args.crowded_only:
        scenes = [s for s in scenes if tag_hard_cases(s).crowded]
    if not scenes:
        print("No scenes to benchmark")
        return 1
    if args.checkpoint:
        model, config = model_from_checkpoint(args.checkpoint, config)
    else:
        seed_everything(config.train.seed)
        model = HOIDetector(config)
    rows = bench_tokens(model, scenes, config)

    if args.csv:
        path = Path(args.csv)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["image_id,intuitive,merged,ratio"] + \
            [f"{r['image_id']},{r['intuitive']},{r['merged']},{r['ratio']:.6f}" for r in rows]
        path.write_text("\n".join(lines) + "\n")

    ratios = [r['ratio'] for r in rows]
    fewer = sum(r['merged'] < r['intuitive'] for r in rows)
    print(f"Scenes:              {len(rows)}")
    print(f"Intuitive token-ops: {sum(r['intuitive'] for r in rows)}")
    print(f"Merged token-ops:    {sum(r['merged'] for r in rows)}")
    print(f"Median ratio:        {statistics.median(ratios):.4f}")
    print(f"Merged cheaper on:   {fewer}/{len(rows)} scenes")
    return 0


def save_heatmap(weights: np.ndarray, path: Path, title: str, image: Optional[np.ndarray] = None):
    """One (H, W) attention map as a PNG, over the rendered image when given"""
    fig, ax = plt.subplots(figsize=(4, 4))
    if image is not None:
        h0, w0 = image.shape[:2]
        ax.imshow(image)
        ax.imshow(weights, cmap='viridis', alpha=0.6, extent=(0, w0, h0, 0), interpolation='nearest')
    else:
        ax.imshow(weights, cmap='viridis', interpolation='nearest')
    ax.set_title(title, fontsize=8)
    ax.axis('off')
    fig.savefig(path, dpi=100, bbox_inches='tight')
    plt.close(fig)


@torch.no_grad()
def cmd_viz_attention(args: argparse.Namespace, config: Config) -> int:
    scenes = load_annotations(data_path(config, args.data, "test.json"))
    by_id = {s.id: s for s in scenes}
    if args.image_id not in by_id:
        raise ValueError(f"Image {args.image_id} is not in the annotation file")
    scene = by_id[args.image_id]

    model, config = model_from_checkpoint(args.checkpoint, config)
    model.eval()
    mode = args.mode or model.interactiveness.mode
    dataset = SceneDataset([scene], config, train=False)
    batch = collate_scenes([dataset[0]])
    recorder = AttentionRecorder()
    out = model(batch['images'], batch['part_masks'], stage=1, recorder=recorder, mode=mode)

    if not 0 <= args.proposal < model.model_cfg.nq:
        raise ValueError(f"Proposal {args.proposal} out of range [0, {model.model_cfg.nq})")
    part = BodyPart.from_key(args.part)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    h, w = model.spec.shape
    image = render_scene(scene)

    records = recorder.select(mode)
    row = int(part) if mode == INTUITIVE else 0
    csv_lines = ["layer,token,weight"]
    for record in records:
        weights = record.weights[row, args.proposal].numpy()
        stem = f"img{scene.id}_q{args.proposal}_{part.key if mode == INTUITIVE else 'merged'}_layer{record.layer}"
        save_heatmap(weights.reshape(h, w), out_dir / f"{stem}.png",
                     f"image {scene.id} proposal {args.proposal} {mode} layer {record.layer}", image)
        csv_lines += [f"{record.layer},{t},{v:.8g}" for t, v in enumerate(weights)]
    (out_dir / f"img{scene.id}_q{args.proposal}_attention.csv").write_text("\n".join(csv_lines) + "\n")

    if args.dump_masks:
        stack = out.mask_stacks[0]
        if out.interactiveness.selection is not None:
            stack = stack.with_selection(out.interactiveness.selection[0])
        (out_dir / f"img{scene.id}_masks.json").write_text(json.dumps(stack.to_dict(), sort_keys=True))
    print(f"✓ {len(records)} heatmaps written to {out_dir}")
    return 0


def cmd_ablate(args: argparse.Namespace, config: Config) -> int:
    tag = ablation_tag(args)
    train_scenes = load_annotations(data_path(config, args.data, "train.json"))
    test_scenes = load_annotations(data_path(config, args.test, "test.json"))
    run_dir = run_path(config, args.run_dir) / f"ablate-{tag}"
    result = train(1, train_scenes, config, run_dir=run_dir, epochs=args.epochs)
    rows = evaluate(config, test_scenes, result.model, None)['interactiveness']
    print_rows(f"Interactiveness AP [{tag}]", rows, "AP")
    (run_dir / "interactiveness.csv").write_text(rows_to_csv(rows, "ap"))
    return 0


# ============================================================================
# Entry point
# ============================================================================

def add_ablation_flags(parser: argparse.ArgumentParser):
    parser.add_argument('--no-progressive', action='store_true', help='Same mask (m2) in every layer')
    parser.add_argument('--no-sampler', action='store_true', help='Uniform sampling (alpha = 1)')
    parser.add_argument('--no-merge', action='store_true', help='Intuitive per-part scheme')
    parser.add_argument('--no-bodypart', action='store_true', help='All-ones attention masks')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='partint', description='Body-part interactiveness HOI detection')
    parser.add_argument('--config', help='TOML config file (default: PARTINT_CONFIG)')
    parser.add_argument('--seed', type=int, help='Training seed override')
    parser.add_argument('--log-level', help='DEBUG, INFO, WARNING ...')

    subparsers = parser.add_subparsers(dest='command', help='Command')

    synth = subparsers.add_parser('synth', help='Generate the synthetic dataset')
    synth.add_argument('--out', help='Output directory (default: paths.data_dir)')
    synth.add_argument('--train', type=int, help='Number of training scenes')
    synth.add_argument('--test', type=int, help='Number of test scenes')
    synth.add_argument('--root-seed', type=int, help='Root seed for scene seeds')
    synth.add_argument('--workers', type=int, default=1, help='Generator processes')
    synth.add_argument('--images', action='store_true', help='Also save rendered PNGs')

    tr = subparsers.add_parser('train', help='Train one stage')
    tr.add_argument('--stage', type=int, choices=(1, 2), required=True)
    tr.add_argument('--data', help='Training annotation file')
    tr.add_argument('--run-dir', help='Run directory (default: paths.run_dir)')
    tr.add_argument('--init', help='Checkpoint to start from (stage 2: the stage-1 checkpoint)')
    tr.add_argument('--epochs', type=int, help='Override the stage length')
    add_ablation_flags(tr)

    ev = subparsers.add_parser('eval', help='Evaluate checkpoints')
    ev.add_argument('--data', help='Test annotation file')
    ev.add_argument('--run-dir', help='Run directory holding stage1.pt / stage2.pt')
    ev.add_argument('--int-checkpoint', help='Stage-1 checkpoint (interactiveness proposals)')
    ev.add_argument('--verb-checkpoint', help='Stage-2 checkpoint (verb proposals)')
    ev.add_argument('--split', choices=[s for s in SPLITS if s != 'full'], help='Report one hard-case split')
    ev.add_argument('--nis', nargs='?', const='default', help='Non-interaction suppression threshold')
    ev.add_argument('--part-ap', action='store_true', help='Also report body-part interactiveness AP')
    ev.add_argument('--out', help='Report directory (default: <run-dir>/eval)')
    add_ablation_flags(ev)

    bench = subparsers.add_parser('bench-tokens', help='Count cross-attention token operations')
    bench.add_argument('--data', help='Annotation file (default: test set)')
    bench.add_argument('--checkpoint', help='Model checkpoint (default: freshly initialized)')
    bench.add_argument('--crowded-only', action='store_true', help='Only crowded scenes')
    bench.add_argument('--csv', help='Per-scene CSV output')

    viz = subparsers.add_parser('viz-attention', help='Export attention heatmaps')
    viz.add_argument('--checkpoint', required=True)
    viz.add_argument('--data', help='Annotation file (default: test set)')
    viz.add_argument('--image-id', type=int, required=True)
    viz.add_argument('--proposal', type=int, default=0)
    viz.add_argument('--part', choices=PART_NAMES, default='hands')
    viz.add_argument('--mode', choices=(MERGED, INTUITIVE))
    viz.add_argument('--out', default='heatmaps')
    viz.add_argument('--dump-masks', action='store_true', help='Also write the mask stack JSON')

    ab = subparsers.add_parser('ablate', help='Train stage 1 with features switched off and evaluate')
    ab.add_argument('--data', help='Training annotation file')
    ab.add_argument('--test', help='Test annotation file')
    ab.add_argument('--run-dir')
    ab.add_argument('--epochs', type=int)
    add_ablation_flags(ab)

    return parser


COMMANDS = {
    'synth': cmd_synth,
    'train': cmd_train,
    'eval': cmd_eval,
    'bench-tokens': cmd_bench_tokens,
    'viz-attention': cmd_viz_attention,
    'ablate': cmd_ablate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    if not args.command:
        parser.print_help()
        return 2

    try:
        config = load_config(args, ablation_overrides(args))
        level = args.log_level or ("DEBUG" if config.monitoring.detailed_logging else None)
        configure_logging(level)
        return COMMANDS[args.command](args, config)
    except EXPECTED_ERRORS + (ValueError,) as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
