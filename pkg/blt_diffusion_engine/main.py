#!/usr/bin/env python3
"""
Hierarchical Byte Diffusion Engine
Main Entry Point for CLI Operations
"""

import argparse
import os
import sys

import pandas as pd

# Add core to path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from analysis.efficiency_metrics import ComponentParams, reproduce_published_cells
from analysis.likelihood import rank_candidates
from core.checkpoint import load_checkpoint
from core.errors import BLTDError, ConfigError, CorpusError, DivergenceError
from core.log import get_logger, set_level
from core.model import HierarchicalModel
from core.patcher import EntropyPatcher
from core.run_config import SCHEMA, RunConfig, parse_overrides
from core.tensor import set_precision
from core.vocab import decode_ids, describe, encode_text
from inference.engines import ENGINES, generate
from inference.trace import STRATEGIES, STRATEGY_ALIASES, UnmaskingConfig, append_trace
from reporting.efficiency_report import EfficiencyReportGenerator
from simulation.sweep_runner import PRESETS, SweepRunner, load_sweep, summarize
from training.optimizer import TrainConfig
from training.trainer import Trainer

# Define base paths
BASE_DIR = os.path.dirname(os.path.abspath(__file__))
DEFAULT_CONFIG_PATH = os.path.join(BASE_DIR, 'data', 'configs', 'desk.conf')

# most specific class first
EXIT_CODES = [
    (DivergenceError, 4),
    (CorpusError, 3),
    (ConfigError, 2),
    (BLTDError, 1),
]

logger = get_logger("bltd.cli")


def unescape(text) -> bytes:
    """Backslash escapes (\\n, \\t, \\xNN) to raw bytes; every other byte passes through unchanged."""
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    if b"\\" not in raw:
        return raw
    try:
        return raw.decode("unicode_escape").encode("latin-1")
    except UnicodeError as e:
        raise ConfigError(f"bad escape sequence in {raw!r}: {e}") from e


def read_bytes(path: str, what: str) -> bytes:
    try:
        with open(path, 'rb') as f:
            return f.read()
    except OSError as e:
        raise CorpusError(f"cannot read {what} {path}: {e.strerror or e}") from e


def read_lines(path: str, what: str):
    """Non-empty escaped lines of a text file as raw byte strings."""
    return [unescape(line) for line in read_bytes(path, what).splitlines() if line.strip()]


def load_run_config(args, **flags) -> RunConfig:
    overrides = parse_overrides(getattr(args, 'set', None))
    overrides.update({k: v for k, v in flags.items() if v is not None})
    config = RunConfig.load(args.config, overrides)
    set_level(config['log_level'])
    set_precision(config['precision'])
    return config


def cmd_init(args):
    """Write the default run configuration"""
    if os.path.exists(args.output) and not args.force:
        raise ConfigError(f"{args.output} already exists (use --force to overwrite)")
    config = RunConfig.load(None, env={})
    with open(args.output, 'w', encoding='utf-8') as f:
        f.write(config.render())
    print(f"Created default configuration: {args.output}")


def cmd_train(args):
    """Fit the patcher, train the model and write checkpoint + loss curve"""
    config = load_run_config(args, seed=args.seed, steps=args.steps)
    corpus = read_bytes(args.corpus, "corpus")
    if not corpus:
        raise CorpusError(f"corpus {args.corpus} is empty")
    train_cfg = TrainConfig.from_run_config(config)

    if args.resume:
        trainer = Trainer.resume(args.resume, train_cfg, corpus)
    else:
        patcher = EntropyPatcher.fit(corpus, config['entropy_order'], config['entropy_smoothing'],
                                     config['target_patch_size'], config['max_patch'], config.threshold)
        logger.info("patcher fitted", extra={"threshold": patcher.threshold, "order": config['entropy_order']})
        trainer = Trainer(HierarchicalModel(config.model_config()), patcher, train_cfg, corpus)

    losses = trainer.train(args.output, args.state, progress=not args.quiet and sys.stderr.isatty())
    loss_csv = args.loss_csv or os.path.splitext(args.output)[0] + '.loss.csv'
    losses.to_csv(loss_csv, index=False)

    last = losses.iloc[-1] if not losses.empty else None
    print(f"Checkpoint: {args.output}")
    print(f"Loss curve: {loss_csv}")
    if last is not None:
        print(f"Final step {int(last['step'])}: L_clean={last['l_clean']:.4f} "
              f"L_mask={last['l_mask']:.4f} L_total={last['l_total']:.4f}")


def _check_generate_flags(args):
    engine = args.engine
    diffusion = engine in ('blt-d', 'blt-dv')
    if args.window is not None and engine != 'blt-s':
        raise ConfigError(f"--window only applies to blt-s, not {engine}")
    for flag, value in (('--block-size', args.block_size), ('--strategy', args.strategy),
                        ('--alpha', args.alpha), ('--gamma', args.gamma), ('--top-p', args.top_p)):
        if value is not None and not diffusion:
            raise ConfigError(f"{flag} only applies to blt-d and blt-dv, not {engine}")
    if args.temperature is not None and engine != 'blt-d':
        raise ConfigError(f"--temperature only applies to blt-d (verification is greedy), not {engine}")
    strategy = STRATEGY_ALIASES.get(args.strategy, args.strategy) or 'confidence'
    if args.alpha is not None and strategy != 'confidence':
        raise ConfigError(f"--alpha needs --strategy confidence, got {strategy}")
    if (args.gamma is not None or args.top_p is not None) and strategy != 'entropy_bounded':
        raise ConfigError(f"--gamma/--top-p need --strategy entropy_bounded, got {strategy}")
    if args.length < 0:
        raise ConfigError(f"--length must be >= 0, got {args.length}")


def _generation_seed(flag):
    """--seed, else BLTD_SEED, else 0; checked like the config key."""
    if flag is not None:
        return SCHEMA['seed'].parse('--seed', flag)
    return SCHEMA['seed'].parse('BLTD_SEED', os.environ.get('BLTD_SEED') or 0)


def _unmasking(args):
    if args.engine not in ('blt-d', 'blt-dv'):
        return None
    options = {'strategy': args.strategy, 'alpha': args.alpha, 'gamma': args.gamma,
               'top_p': args.top_p, 'temperature': args.temperature}
    return UnmaskingConfig(**{k: v for k, v in options.items() if v is not None})


def cmd_generate(args):
    """Generate bytes with one of the four engines"""
    _check_generate_flags(args)
    cfg = _unmasking(args)
    if args.prompt_file:
        prompt = read_bytes(args.prompt_file, "prompt file")
    else:
        prompt = unescape(args.prompt or '')
    seed = _generation_seed(args.seed)

    ckpt = load_checkpoint(args.checkpoint)
    output, trace = generate(args.engine, ckpt.model, ckpt.patcher, encode_text(prompt), args.length,
                             block_size=args.block_size or 8, window=args.window or 4, cfg=cfg,
                             seed=seed, use_cache=not args.no_cache)
    trace.seed = seed
    generated = decode_ids(output[trace.prompt_len:])
    if args.hex:
        print(generated.hex())
    else:
        sys.stdout.buffer.write(generated)
        sys.stdout.buffer.flush()
    if args.trace:
        append_trace(args.trace, trace)


def cmd_bench(args):
    """Run an engine sweep over a prompt set and write the bench CSV"""
    config = load_run_config(args)
    cells = load_sweep(args.sweep, args.preset)
    prompts = read_lines(args.prompts, "prompt set")
    if not prompts:
        raise CorpusError(f"prompt set {args.prompts} has no prompts")

    ckpt = load_checkpoint(args.checkpoint)
    b = args.bytes_per_param or config['bytes_per_param']
    runner = SweepRunner(ckpt.model, ckpt.patcher, prompts, cells, args.length,
                         ComponentParams.from_model(ckpt.model, b), workers=args.workers,
                         use_cache=not args.no_cache)
    rows = runner.run(progress=sys.stderr.isatty())
    rows.to_csv(args.output, index=False)

    print(f"Wrote {len(rows)} rows to {args.output}")
    with pd.option_context('display.width', 160, 'display.max_columns', 20):
        print(summarize(rows).to_string(index=False))


def cmd_score(args):
    """Rank candidate strings by log-probability"""
    candidates = read_lines(args.candidates, "candidates file")
    if not candidates:
        raise CorpusError(f"candidates file {args.candidates} is empty")
    ckpt = load_checkpoint(args.checkpoint)
    ranking = rank_candidates(ckpt.model, ckpt.patcher, candidates)

    for i, (candidate, lp) in enumerate(zip(candidates, ranking['logprobs'])):
        print(f"{i}\t{lp:.6f}\t{candidate!r}")
    print(f"argmax\t{ranking['best']}")


def cmd_patch_inspect(args):
    """Show how the entropy patcher segments a text"""
    if args.checkpoint:
        patcher = load_checkpoint(args.checkpoint).patcher
    elif args.corpus:
        config = load_run_config(args)
        patcher = EntropyPatcher.fit(read_bytes(args.corpus, "corpus"), config['entropy_order'],
                                     config['entropy_smoothing'], config['target_patch_size'],
                                     config['max_patch'], config.threshold)
    else:
        raise ConfigError("patch-inspect needs --checkpoint or --corpus")
    text = read_bytes(args.text_file, "text file") if args.text_file else unescape(args.text or '')

    x = encode_text(text)
    seg = patcher.segment(x)
    print(f"threshold {patcher.threshold:.4f} nats, max patch {patcher.max_patch}")
    print(f"{len(text)} bytes -> {seg.num_patches} patches (BOS included), "
          f"average {len(text) / max(seg.num_patches - 1, 1):.2f} bytes per patch")
    for i, patch in enumerate(seg.patches(x)):
        start = int(seg.starts[i])
        print(f"{i + 1:>4} @{start:<5} {seg.triggers[i]:<9} "
              f"H={seg.entropies[start - 2] if start > 1 else 0.0:.3f} {''.join(describe(s) for s in patch)}")
    print(f"last patch {'closed' if seg.closes_at_end else 'open'}")


def cmd_report(args):
    """Write the efficiency workbook"""
    bench = pd.read_csv(args.bench) if args.bench else None
    published = reproduce_published_cells(args.published)
    info = {
        'Published rows': len(published),
        'Bench file': args.bench or '-',
    }
    EfficiencyReportGenerator(info, bench, published).generate(args.output)
    over = int((~published["stated_within_tolerance"]).sum())
    print(f"Published cells: {int(published['reproduced'].sum())} / {len(published)} reproduced, "
          f"{over} over 1% at stated sizes")
    print(f"Report saved to {args.output}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description='Hierarchical byte language model with block diffusion and self-speculative decoding'
    )
    subparsers = parser.add_subparsers(dest='command', help='Available commands')

    def add_config(p):
        p.add_argument('--config', default=DEFAULT_CONFIG_PATH, help='key = value run configuration file')
        p.add_argument('--set', action='append', metavar='KEY=VALUE', help='Override one config key')

    # Init command
    init_parser = subparsers.add_parser('init', help='Write the default run configuration')
    init_parser.add_argument('--output', '-o', default='bltd.conf')
    init_parser.add_argument('--force', action='store_true')
    init_parser.set_defaults(func=cmd_init)

    # Train command
    train_parser = subparsers.add_parser('train', help='Train a model on a raw byte corpus')
    add_config(train_parser)
    train_parser.add_argument('--corpus', required=True, help='Raw byte corpus file')
    train_parser.add_argument('--output', '-o', required=True, help='Checkpoint path')
    train_parser.add_argument('--loss-csv', help='Loss curve CSV (default: <output>.loss.csv)')
    train_parser.add_argument('--state', help='Full-precision training-state container for resuming')
    train_parser.add_argument('--resume', help='Resume from a training-state container')
    train_parser.add_argument('--seed', type=int)
    train_parser.add_argument('--steps', type=int)
    train_parser.add_argument('--quiet', action='store_true', help='No progress bar')
    train_parser.set_defaults(func=cmd_train)

    # Generate command
    gen_parser = subparsers.add_parser('generate', help='Generate bytes from a checkpoint')
    gen_parser.add_argument('checkpoint')
    prompt = gen_parser.add_mutually_exclusive_group()
    prompt.add_argument('--prompt', help='Prompt literal (backslash escapes allowed)')
    prompt.add_argument('--prompt-file', help='Prompt file read as raw bytes')
    gen_parser.add_argument('--engine', choices=ENGINES, default='ar')
    gen_parser.add_argument('--block-size', type=int, help='Diffusion block size B')
    gen_parser.add_argument('--window', type=int, help='blt-s speculation window k')
    gen_parser.add_argument('--strategy', choices=sorted(STRATEGIES + tuple(STRATEGY_ALIASES)))
    gen_parser.add_argument('--alpha', type=float)
    gen_parser.add_argument('--gamma', type=float)
    gen_parser.add_argument('--top-p', type=float)
    gen_parser.add_argument('--temperature', type=float)
    gen_parser.add_argument('--length', type=int, default=64, help='Bytes to generate')
    gen_parser.add_argument('--seed', type=int)
    gen_parser.add_argument('--trace', help='Append the decode trace (JSON line) to this file')
    gen_parser.add_argument('--hex', action='store_true', help='Print output as hex')
    gen_parser.add_argument('--no-cache', action='store_true', help='Recompute every pass from scratch')
    gen_parser.set_defaults(func=cmd_generate)

    # Bench command
    bench_parser = subparsers.add_parser('bench', help='Run an engine sweep and write the bench CSV')
    add_config(bench_parser)
    bench_parser.add_argument('checkpoint')
    bench_parser.add_argument('--prompts', required=True, help='One escaped prompt per line')
    sweep = bench_parser.add_mutually_exclusive_group(required=True)
    sweep.add_argument('--sweep', help='Sweep file: one "engine: key=value ..." cell per line')
    sweep.add_argument('--preset', choices=sorted(PRESETS))
    bench_parser.add_argument('--length', type=int, default=128)
    bench_parser.add_argument('--bytes-per-param', type=int, choices=[1, 2, 4, 8])
    bench_parser.add_argument('--workers', type=int, default=1)
    bench_parser.add_argument('--no-cache', action='store_true')
    bench_parser.add_argument('--output', '-o', default='bench.csv')
    bench_parser.set_defaults(func=cmd_bench)

    # Score command
    score_parser = subparsers.add_parser('score', help='Rank candidates by log-probability')
    score_parser.add_argument('checkpoint')
    score_parser.add_argument('candidates', help='One escaped candidate per line')
    score_parser.set_defaults(func=cmd_score)

    # Patch inspection
    patch_parser = subparsers.add_parser('patch-inspect', help='Show entropy patch boundaries')
    add_config(patch_parser)
    patch_parser.add_argument('--checkpoint')
    patch_parser.add_argument('--corpus', help='Fit a patcher on this corpus instead of a checkpoint')
    text = patch_parser.add_mutually_exclusive_group(required=True)
    text.add_argument('--text')
    text.add_argument('--text-file')
    patch_parser.set_defaults(func=cmd_patch_inspect)

    # Report command
    report_parser = subparsers.add_parser('report', help='Write the efficiency workbook')
    report_parser.add_argument('--bench', help='Bench CSV to include')
    report_parser.add_argument('--published', help='Published-cell TSV (default: bundled table)')
    report_parser.add_argument('--output', '-o', default='efficiency_report.xlsx')
    report_parser.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command is None:
        parser.print_help()
        return 0

    try:
        args.func(args)
    except BLTDError as e:
        print(f"Error: {e}", file=sys.stderr)
        return next(code for cls, code in EXIT_CODES if isinstance(e, cls))
    return 0


if __name__ == '__main__':
    sys.exit(main())
