"""The ``dashkv`` command line.

Subcommands::

    dashkv gen          synthetic attention traces
    dashkv train        per-layer hash encoders from traces
    dashkv eval         recall, KL and latency of retrieval variants
    dashkv bench        dense against hashed per-token latency
    dashkv sensitivity  end-of-stack distortion per replaced layer
    dashkv sweep        code length trade-off

Every subcommand takes ``--log-level``, ``--log-create`` and
``--log-filename``.
"""

from __future__ import annotations

import gettext
import logging
import pathlib
import sys
from typing import TYPE_CHECKING, NoReturn

from . import (
    __version__,
    attention,
    checkpoint,
    command,
    experiments,
    metrics,
    options,
    traces,
    training,
)
from .command import boolarg, intlist, strlist

if TYPE_CHECKING:
    import argparse
    from collections.abc import Sequence

    from .traces import AttentionTrace

_DEFAULT_VARIANTS = ('naive_lsh', 'symmetric', 'asymmetric')

_ = gettext.gettext
logger = logging.getLogger(__name__)


def _add_seed_out(parser: argparse.ArgumentParser, out: str) -> None:
    parser.add_argument(
        '--seed', type=int, default=0, help=_('Random seed.')
    )
    parser.add_argument(
        '--out', default=out, help=_('Output directory.')
    )


def _add_attention_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        '--p1',
        type=float,
        default=10.0,
        help=_('Percentile of keys kept at full precision.'),
    )
    parser.add_argument(
        '--p2',
        type=float,
        default=50.0,
        help=_('Percentile of keys scored by hash and residual.'),
    )
    parser.add_argument(
        '--n-sink',
        type=int,
        default=4,
        help=_('Leading tokens always kept at full precision.'),
    )
    parser.add_argument(
        '--n-local',
        type=int,
        default=8,
        help=_('Trailing window always kept at full precision.'),
    )


def _add_train_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        '--steps', type=int, default=200, help=_('SGD steps per layer.')
    )
    parser.add_argument(
        '--learning-rate', type=float, default=1e-2, help=_('Step size.')
    )
    parser.add_argument(
        '--batch', type=int, default=4, help=_('Query rows per step.')
    )
    parser.add_argument(
        '--code-bits', type=int, default=16, help=_('Hash code length.')
    )
    parser.add_argument(
        '--hidden', type=int, default=256, help=_('Query MLP width.')
    )
    parser.add_argument(
        '--residual-width',
        type=int,
        default=attention.RESIDUAL_WIDTH,
        help=_('Residual MLP width.'),
    )
    parser.add_argument(
        '--check-progress',
        type=boolarg,
        default=True,
        help=_('Fail a layer whose loss does not decrease.'),
    )
    parser.add_argument(
        '--align',
        type=boolarg,
        default=True,
        help=_('Start the encoders from the traces before SGD.'),
    )
    parser.add_argument(
        '--tau-teacher',
        type=float,
        default=1.0,
        help=_('Teacher softmax temperature.'),
    )
    parser.add_argument(
        '--tau-student',
        type=float,
        default=0.05,
        help=_('Student softmax temperature.'),
    )
    parser.add_argument(
        '--alpha-balance',
        type=float,
        default=0.1,
        help=_('Bit balance loss weight.'),
    )
    parser.add_argument(
        '--beta-quant',
        type=float,
        default=0.1,
        help=_('Quantization loss weight.'),
    )


def _add_traces_option(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        '--traces', required=True, help=_('Trace directory.')
    )
    parser.add_argument(
        '--layers',
        type=intlist,
        default=None,
        help=_('Comma separated layers, default every traced layer.'),
    )


def _trace_layers(
    directory: str, layers: Sequence[int] | None
) -> dict[int, list[AttentionTrace]]:
    available = traces.trace_layers(directory)
    if not available:
        raise experiments.ConfigurationError(f'no traces in {directory}')
    selected = available if layers is None else list(layers)
    missing = sorted(set(selected) - set(available))
    if missing:
        raise experiments.ConfigurationError(
            f'no traces for layers {missing} in {directory}'
        )
    return {
        layer: traces.load_layer_traces(directory, layer)
        for layer in selected
    }


def _previous_layer(
    directory: str, layer: int
) -> list[AttentionTrace] | None:
    if layer == 0 or layer - 1 not in traces.trace_layers(directory):
        return None
    return traces.load_layer_traces(directory, layer - 1)


class Gen(command.Command):
    """Generate synthetic traces."""

    name = 'gen'
    description = _('Write synthetic attention traces.')

    def add_options(self, parser: argparse.ArgumentParser) -> None:
        """Add CLI options."""
        _add_seed_out(parser, 'traces')
        parser.add_argument(
            '--sample-seed',
            type=int,
            default=0,
            help=_('Token sample seed, vary it for held-out traces.'),
        )
        parser.add_argument(
            '--layers', dest='n_layers', type=int, default=4
        )
        parser.add_argument('--heads', dest='n_heads', type=int, default=2)
        parser.add_argument('--d', type=int, default=32)
        parser.add_argument('--seq-len', type=int, default=512)
        parser.add_argument(
            '--n-queries',
            type=int,
            default=64,
            help=_('Query rows per trace, the last positions.'),
        )
        parser.add_argument('--n-clusters', type=int, default=8)
        parser.add_argument('--cluster-spread', type=float, default=0.3)
        parser.add_argument(
            '--sink-boost',
            type=float,
            default=3.0,
            help=_('Extra logit mass on the first tokens.'),
        )
        parser.add_argument(
            '--layer-drift',
            type=float,
            default=0.15,
            help=_('Rotation of the feature space per layer.'),
        )

    def post_process_options(self) -> None:
        """Build the generator config."""
        self.config = traces.SyntheticConfig.from_options(self.options)

    def effect(self) -> None:
        """Generate and write traces."""
        generated = traces.generate_traces(self.config)
        paths = traces.save_traces(self.options.out, generated)
        logger.info('wrote %d traces to %s', len(paths), self.options.out)


class Train(command.Command):
    """Train per-layer encoders."""

    name = 'train'
    description = _('Train hash encoders on traces.')

    def add_options(self, parser: argparse.ArgumentParser) -> None:
        """Add CLI options."""
        _add_seed_out(parser, 'checkpoints')
        _add_traces_option(parser)
        _add_attention_options(parser)
        _add_train_options(parser)
        parser.add_argument(
            '--symmetric',
            type=boolarg,
            default=False,
            help=_('Share one projection between queries and keys.'),
        )
        parser.add_argument(
            '--objective',
            choices=[o.value for o in training.Objective],
            default=training.Objective.DISTILL.value,
            help=_('Residual training objective.'),
        )

    def post_process_options(self) -> None:
        """Build the training config."""
        self.config = training.TrainConfig.from_options(self.options)
        self.weights = training.LossWeights.from_options(self.options)
        self.policy = attention.PriorPolicy.from_options(self.options)

    def effect(self) -> None:
        """Train every selected layer and write checkpoints."""
        layers = _trace_layers(self.options.traces, self.options.layers)
        out = pathlib.Path(self.options.out)
        out.mkdir(parents=True, exist_ok=True)
        results = experiments.train_stack(
            layers,
            self.config,
            training.Objective(self.options.objective),
            weights=self.weights,
            policy=self.policy,
            workers=options.max_workers(),
        )
        for layer, result in results.items():
            checkpoint.save_layer(out, result.params)
            training.write_loss_csv(
                out / f'layer{layer:03d}_loss.csv', result.curve
            )


class Eval(command.Command):
    """Evaluate retrieval variants."""

    name = 'eval'
    description = _('Recall, KL to full attention and latency.')

    def add_options(self, parser: argparse.ArgumentParser) -> None:
        """Add CLI options."""
        _add_seed_out(parser, 'results')
        _add_traces_option(parser)
        _add_attention_options(parser)
        parser.add_argument(
            '--variants',
            type=strlist,
            default=_DEFAULT_VARIANTS,
            help=_('Comma separated variants to evaluate.'),
        )
        parser.add_argument(
            '--checkpoint', default=None, help=_('Asymmetric checkpoints.')
        )
        parser.add_argument(
            '--symmetric-checkpoint',
            default=None,
            help=_('Symmetric checkpoints.'),
        )
        parser.add_argument(
            '--k',
            type=int,
            default=0,
            help=_('Recall cutoff, 0 scales it with the cache size.'),
        )
        parser.add_argument(
            '--code-bits',
            type=int,
            default=16,
            help=_('Code length of the naive projection.'),
        )

    def post_process_options(self) -> None:
        """Validate variants and their checkpoint flags."""
        try:
            self.variants = [
                experiments.Variant(v) for v in self.options.variants
            ]
        except ValueError as error:
            raise experiments.ConfigurationError(str(error)) from error
        flags = {
            experiments.Variant.ASYMMETRIC: 'checkpoint',
            experiments.Variant.SYMMETRIC: 'symmetric_checkpoint',
        }
        for variant, flag in flags.items():
            if variant in self.variants and not getattr(self.options, flag):
                raise experiments.ConfigurationError(
                    f'variant {variant.value} needs'
                    f' --{flag.replace("_", "-")}'
                )
        self.config = experiments.EvalConfig.from_options(self.options)

    def _params(
        self, variant: experiments.Variant, layer: int
    ) -> checkpoint.LayerParams | None:
        if variant == experiments.Variant.ASYMMETRIC:
            return experiments.load_params(self.options.checkpoint, layer)
        if variant == experiments.Variant.SYMMETRIC:
            return experiments.load_params(
                self.options.symmetric_checkpoint, layer
            )
        return None

    def effect(self) -> None:
        """Evaluate every variant on every selected layer."""
        layers = _trace_layers(self.options.traces, self.options.layers)
        records = []
        for layer, layer_traces in layers.items():
            prev = _previous_layer(self.options.traces, layer)
            records.extend(
                experiments.run_variant_eval(
                    variant,
                    layer_traces,
                    self._params(variant, layer),
                    self.config,
                    prev,
                )
                for variant in self.variants
            )
        out = pathlib.Path(self.options.out)
        out.mkdir(parents=True, exist_ok=True)
        metrics.write_rows(out / 'metrics.csv', metrics.METRICS_FIELDS, records)


class Bench(command.Command):
    """Latency benchmark."""

    name = 'bench'
    description = _('Per token latency of dense and hashed scoring.')

    def add_options(self, parser: argparse.ArgumentParser) -> None:
        """Add CLI options."""
        _add_seed_out(parser, 'results')
        parser.add_argument(
            '--seq-lens',
            type=intlist,
            default=(4096, 8192, 16384),
            help=_('Comma separated ascending sequence lengths.'),
        )
        parser.add_argument('--trials', type=int, default=5)
        parser.add_argument('--warmup', type=int, default=10)
        parser.add_argument(
            '--heads', type=int, default=4, help=_('Heads scored per token.')
        )
        parser.add_argument('--d', type=int, default=128)
        parser.add_argument('--code-bits', type=int, default=128)
        parser.add_argument(
            '--calibration',
            type=boolarg,
            default=False,
            help=_('Count cross-head votes in the hashed pass.'),
        )
        _add_attention_options(parser)

    def post_process_options(self) -> None:
        """Build the benchmark config."""
        self.config = experiments.BenchConfig.from_options(self.options)

    def effect(self) -> None:
        """Time both passes and write the latency table."""
        rows = experiments.latency_bench(self.config)
        out = pathlib.Path(self.options.out)
        out.mkdir(parents=True, exist_ok=True)
        metrics.write_rows(out / 'latency.csv', metrics.LATENCY_FIELDS, rows)


class Sensitivity(command.Command):
    """Per layer replacement sensitivity."""

    name = 'sensitivity'
    description = _('End-of-stack distortion of single layer replacement.')

    def add_options(self, parser: argparse.ArgumentParser) -> None:
        """Add CLI options."""
        _add_seed_out(parser, 'results')
        parser.add_argument(
            '--traces', required=True, help=_('Trace directory.')
        )
        parser.add_argument(
            '--checkpoint', required=True, help=_('Asymmetric checkpoints.')
        )
        parser.add_argument(
            '--layers',
            type=intlist,
            default=None,
            help=_('Layers to replace, default all.'),
        )
        parser.add_argument(
            '--coupling',
            type=float,
            default=0.5,
            help=_('Strength of the error coupling between layers.'),
        )
        parser.add_argument('--output-gain', type=float, default=1.0)
        parser.add_argument(
            '--early-boost',
            type=float,
            default=4.0,
            help=_('Extra output gain of early layers.'),
        )
        _add_attention_options(parser)

    def post_process_options(self) -> None:
        """Build the evaluation config."""
        self.config = experiments.EvalConfig.from_options(self.options)

    def effect(self) -> None:
        """Replace each layer in turn and write the distortion table."""
        stack = _trace_layers(self.options.traces, None)
        replaced = self.options.layers
        if replaced is None:
            replaced = sorted(stack)
        params = {
            layer: experiments.load_params(self.options.checkpoint, layer)
            for layer in replaced
        }
        first = stack[0]
        synthetic = traces.SyntheticConfig(
            seed=self.options.seed,
            n_layers=len(stack),
            n_heads=len(first),
            d=first[0].d,
            seq_len=first[0].n_k,
            n_queries=first[0].n_q,
        )
        couplings = traces.StackCouplings.derive(
            synthetic,
            self.options.coupling,
            self.options.output_gain,
            self.options.early_boost,
        )
        rows = experiments.layer_sensitivity(
            stack, params, couplings, self.config, replaced
        )
        out = pathlib.Path(self.options.out)
        out.mkdir(parents=True, exist_ok=True)
        metrics.write_rows(
            out / 'sensitivity.csv', metrics.SENSITIVITY_FIELDS, rows
        )


class Sweep(command.Command):
    """Code length sweep."""

    name = 'sweep'
    description = _('Recall, KL and bytes per key across code lengths.')

    def add_options(self, parser: argparse.ArgumentParser) -> None:
        """Add CLI options."""
        _add_seed_out(parser, 'results')
        parser.add_argument(
            '--traces', required=True, help=_('Training traces.')
        )
        parser.add_argument(
            '--eval-traces',
            default=None,
            help=_('Held-out traces, default the training traces.'),
        )
        parser.add_argument('--layer', type=int, default=0)
        parser.add_argument(
            '--lengths',
            type=intlist,
            default=(8, 16, 32, 64),
            help=_('Comma separated code lengths.'),
        )
        parser.add_argument('--k', type=int, default=0)
        _add_attention_options(parser)
        _add_train_options(parser)

    def post_process_options(self) -> None:
        """Build the training and evaluation configs."""
        if not self.options.eval_traces:
            self.options.eval_traces = self.options.traces
        self.train_config = training.TrainConfig.from_options(self.options)
        self.weights = training.LossWeights.from_options(self.options)
        self.eval_config = experiments.EvalConfig.from_options(self.options)

    def effect(self) -> None:
        """Train and evaluate at each code length."""
        layer = self.options.layer
        train = _trace_layers(self.options.traces, [layer])[layer]
        held = _trace_layers(self.options.eval_traces, [layer])[layer]
        rows = experiments.code_length_sweep(
            self.options.lengths,
            train,
            held,
            self.train_config,
            self.eval_config,
            weights=self.weights,
            prev_train=_previous_layer(self.options.traces, layer),
            prev_eval=_previous_layer(self.options.eval_traces, layer),
        )
        out = pathlib.Path(self.options.out)
        out.mkdir(parents=True, exist_ok=True)
        metrics.write_rows(
            out / 'code_length.csv', metrics.CODE_LENGTH_FIELDS, rows
        )


COMMANDS: dict[str, type[command.Command]] = {
    cmd.name: cmd for cmd in (Gen, Train, Eval, Bench, Sensitivity, Sweep)
}


def _usage() -> str:
    names = ', '.join(COMMANDS)
    return f'usage: dashkv {{{names}}} [options]  (version {__version__})'


def run(argv: Sequence[str] | None = None) -> int:
    """Dispatch ``argv`` to a subcommand and return its exit status."""
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] in {'-h', '--help'}:
        print(_usage())  # noqa: T201
        return command.EXIT_OK
    if not argv or argv[0] not in COMMANDS:
        print(_usage(), file=sys.stderr)  # noqa: T201
        return command.EXIT_CONFIG
    return COMMANDS[argv[0]]().run(argv[1:])


def main() -> NoReturn:
    """Console script entry point."""
    sys.exit(run())


if __name__ == '__main__':
    main()
