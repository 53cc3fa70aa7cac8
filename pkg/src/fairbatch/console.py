"""Colored terminal output and logging setup for the command line app."""

from __future__ import annotations

import logging
from enum import Enum
from typing import TYPE_CHECKING

import typer

if TYPE_CHECKING:
    from collections.abc import Sequence


class Color(Enum):
    """ANSI color codes."""

    # keep-sorted start
    BOLD_GREEN = "\033[1;32m"
    BOLD_RED = "\033[1;31m"
    BOLD_WHITE = "\033[1;37m"
    CYAN = "\033[36m"
    NONE = "\033[0m"
    YELLOW = "\033[33m"
    # keep-sorted end


def print_color(color: Color, *message: str, join_nl: bool = False, err: bool = False) -> None:
    """Print a colored message."""
    joined_messages = ("\n" if join_nl else " ").join(message)
    typer.echo(f"{color.value}{joined_messages}{Color.NONE.value}", err=err)


def print_normal(*message: str, join_nl: bool = False) -> None:
    """Print a message without color."""
    typer.echo(("\n" if join_nl else " ").join(message))


def print_success(*message: str, join_nl: bool = False) -> None:
    """Print a success message."""
    print_color(Color.BOLD_GREEN, *message, join_nl=join_nl)


def print_error(*message: str, join_nl: bool = False) -> None:
    """Print an error message on stderr."""
    print_color(Color.BOLD_RED, *message, join_nl=join_nl, err=True)


def print_warning(*message: str, join_nl: bool = False) -> None:
    """Print a warning message."""
    print_color(Color.YELLOW, *message, join_nl=join_nl)


def format_cell(value: object) -> str:
    """Render one table cell: floats with 4 decimals, missing values as a dash."""
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def print_table(header: Sequence[str], rows: Sequence[Sequence[object]]) -> None:
    """Print rows as a fixed-width table, header in bold."""
    cells = [[format_cell(value) for value in row] for row in rows]
    widths = [max([len(title)] + [len(row[index]) for row in cells]) for index, title in enumerate(header)]
    print_color(Color.BOLD_WHITE, "  ".join(title.ljust(width) for title, width in zip(header, widths)))
    for row in cells:
        print_normal("  ".join(cell.ljust(width) for cell, width in zip(row, widths)))


def configure_logging(verbose: bool) -> None:
    """Send library warnings (or everything, when verbose) to stderr."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format=f"{Color.CYAN.value}%(name)s{Color.NONE.value} %(levelname)s %(message)s",
        force=True,
    )
