"""
Terminal colours for CLI reports.
Disabled when stdout is not a terminal or NO_COLOR is set.
"""

import os
import sys


class Colors:
    """ANSI codes; colorize() leaves text plain while ENABLED is False."""

    ENABLED = (
        hasattr(sys.stdout, 'isatty') and sys.stdout.isatty()
        and os.getenv('NO_COLOR') is None
    )

    RED = '\033[91m'
    GREEN = '\033[92m'
    YELLOW = '\033[93m'
    CYAN = '\033[96m'
    BOLD = '\033[1m'
    DIM = '\033[2m'
    RESET = '\033[0m'

    @staticmethod
    def enable():
        """Turn on ANSI handling on Windows 10+ consoles."""
        if sys.platform == 'win32':
            try:
                import ctypes
                kernel32 = ctypes.windll.kernel32
                kernel32.SetConsoleMode(kernel32.GetStdHandle(-11), 7)
            except Exception:
                Colors.ENABLED = False

    @staticmethod
    def disable():
        Colors.ENABLED = False

    @staticmethod
    def colorize(text: str, color: str) -> str:
        if not Colors.ENABLED:
            return text
        return f"{color}{text}{Colors.RESET}"


def red(text: str) -> str:
    return Colors.colorize(text, Colors.RED)

def green(text: str) -> str:
    return Colors.colorize(text, Colors.GREEN)

def yellow(text: str) -> str:
    return Colors.colorize(text, Colors.YELLOW)

def cyan(text: str) -> str:
    return Colors.colorize(text, Colors.CYAN)

def bold(text: str) -> str:
    return Colors.colorize(text, Colors.BOLD)

def dim(text: str) -> str:
    return Colors.colorize(text, Colors.DIM)


def rate(value: float, good: float = 0.8, fair: float = 0.5) -> str:
    """Format a success rate or accuracy as a percentage, coloured by band."""
    if value != value:
        return dim('   n/a')
    text = f"{100 * value:5.1f}%"
    if value >= good:
        return green(text)
    return yellow(text) if value >= fair else red(text)


def status(ok: bool) -> str:
    return green('[OK]') if ok else yellow('[!!]')
