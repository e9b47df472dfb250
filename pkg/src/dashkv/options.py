"""Option dataclass support and process-wide settings."""

from __future__ import annotations

import os
from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:
    from typing_extensions import Self

# Environment variable capping worker threads
THREADS_ENV = 'DASHKV_THREADS'


class Options:
    """Mixin for dataclasses that can be built from argparse options."""

    @classmethod
    def from_options(
        cls, options: object, **overrides: Any  # noqa: ANN401
    ) -> Self:
        """Transfer options from, say argparse.Namespace, to this class.

        Only attributes with the same name as a dataclass field are
        copied. Keyword overrides win over ``options``.
        """
        # This might break since __dataclass_fields__ is undocumented
        # pylint: disable-next=no-member
        fields = set(cls.__dataclass_fields__.keys())  # type: ignore
        values = {
            name: getattr(options, name)
            for name in fields
            if name in options.__dict__
        }
        values.update(overrides)
        return cls(**values)


def max_workers() -> int:
    """Worker cap for fan-out jobs, from ``DASHKV_THREADS``."""
    value = os.environ.get(THREADS_ENV, '')
    if value.strip().isdigit() and int(value) > 0:
        return int(value)
    return os.cpu_count() or 1
