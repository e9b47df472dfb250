"""Command line tool base class.

A :class:`Command` parses its options, configures logging, then runs
:meth:`Command.effect` and reports the elapsed time. Subclasses add
their own options in :meth:`Command.add_options`.
"""

from __future__ import annotations

import argparse
import gettext
import logging
import sys

# For performance measuring and debugging
import timeit
from datetime import timedelta
from typing import TYPE_CHECKING, NoReturn

from .experiments import ConfigurationError
from .numerics import NumericsError

if TYPE_CHECKING:
    from collections.abc import Sequence

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_FAILURE = 2

_LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR')
_LOG_FORMAT = '%(levelname)s %(name)s: %(message)s'

_ = gettext.gettext
logger = logging.getLogger(__name__)


class UsageError(Exception):
    """Bad command line."""


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise UsageError(message)


def boolarg(value: str) -> bool:
    """Parse true/false style option values."""
    text = value.strip().lower()
    if text in {'true', 'yes', 'on', '1'}:
        return True
    if text in {'false', 'no', 'off', '0'}:
        return False
    raise argparse.ArgumentTypeError(f'not a boolean: {value}')


def intlist(value: str) -> tuple[int, ...]:
    """Parse a comma separated list of integers."""
    try:
        return tuple(int(v) for v in value.split(',') if v.strip())
    except ValueError as error:
        raise argparse.ArgumentTypeError(str(error)) from error


def strlist(value: str) -> tuple[str, ...]:
    """Parse a comma separated list of names."""
    return tuple(v.strip() for v in value.split(',') if v.strip())


class Command:
    """Base class of the dashkv subcommands."""

    # Subcommand name, used as the program name and in log records
    name = 'dashkv'
    description = ''

    def __init__(self) -> None:
        """Empty options until :meth:`run` parses them."""
        self.options = argparse.Namespace()

    def add_options(self, parser: argparse.ArgumentParser) -> None:
        """Add subcommand options."""

    def post_process_options(self) -> None:
        """Check and convert option values after parsing."""

    def effect(self) -> None:
        """Do the work of the subcommand."""
        raise NotImplementedError

    def _add_base_options(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument(
            '--log-level',
            default='WARNING',
            choices=_LOG_LEVELS,
            help=_('Log level.'),
        )
        parser.add_argument(
            '--log-create',
            type=boolarg,
            default=False,
            help=_('Write log records to a file.'),
        )
        parser.add_argument(
            '--log-filename',
            default='dashkv.log',
            help=_('Log file name.'),
        )

    def _init_logging(self) -> None:
        level = getattr(logging, self.options.log_level)
        if self.options.log_create:
            logging.basicConfig(
                filename=self.options.log_filename,
                filemode='w',
                level=level,
                format=_LOG_FORMAT,
                force=True,
            )
        else:
            logging.basicConfig(level=level, format=_LOG_FORMAT, force=True)

    def _fail(self, status: int, error: Exception) -> int:
        print(f'{self.name}: {error}', file=sys.stderr)  # noqa: T201
        return status

    def run(self, argv: Sequence[str] | None = None) -> int:
        """Parse ``argv``, run the subcommand.

        Returns:
            The process exit status: 0 on success, 1 for usage and
            configuration errors, 2 for any other failure.
        """
        parser = _ArgumentParser(
            prog=self.name, description=self.description or None
        )
        self._add_base_options(parser)
        self.add_options(parser)
        try:
            self.options = parser.parse_args(argv)
        except UsageError as error:
            print(parser.format_usage(), end='', file=sys.stderr)  # noqa: T201
            return self._fail(EXIT_CONFIG, error)
        except SystemExit as error:
            # --help
            return int(error.code or 0)
        self._init_logging()
        try:
            self.post_process_options()
        except (ConfigurationError, NumericsError) as error:
            logger.error('%s: %s', self.name, error)
            return self._fail(EXIT_CONFIG, error)

        timer_start = timeit.default_timer()
        try:
            self.effect()
        except ConfigurationError as error:
            logger.error('%s: %s', self.name, error)
            return self._fail(EXIT_CONFIG, error)
        except Exception as error:  # noqa: BLE001 pylint: disable=W0718
            logger.exception('%s failed', self.name)
            return self._fail(EXIT_FAILURE, error)
        total_time = timeit.default_timer() - timer_start
        logger.info(
            '%s time: %s', self.name, str(timedelta(seconds=total_time))
        )
        return EXIT_OK

    def main(self) -> NoReturn:
        """Run with ``sys.argv`` and exit with the resulting status."""
        sys.exit(self.run(sys.argv[1:]))
