"""
Terminal progress bar for long loops (data generation, training, rollouts).

Writes to stderr so reports on stdout stay clean. An instance is also a
progress callback: bar(n) advances by n.
"""

import sys
import threading
import time
from typing import Optional


class ProgressBar:
    """Simple terminal progress bar."""

    def __init__(self, total: int, prefix: str = 'Progress', width: int = 40, enabled: bool = True):
        self.total = total
        self.current = 0
        self.prefix = prefix
        self.width = width
        self.enabled = enabled
        self.start_time = time.time()
        self._lock = threading.Lock()

    def __call__(self, count: int = 1) -> None:
        self.update(count)

    def update(self, count: int = 1, suffix: str = ''):
        """Advance by count; safe to call from rollout worker threads."""
        with self._lock:
            self.current = min(self.current + count, self.total)
            if not self.enabled:
                return

            percent = 100 * (self.current / self.total) if self.total > 0 else 100
            filled = int(self.width * self.current / self.total) if self.total > 0 else self.width
            bar = '#' * filled + '-' * (self.width - filled)

            elapsed = time.time() - self.start_time
            rate = self.current / elapsed if elapsed > 0 else 0.0
            eta_str = ''
            if 0 < self.current < self.total and rate > 0:
                eta_str = f" ETA: {int((self.total - self.current) / rate)}s"

            sys.stderr.write(f'\r{self.prefix}: [{bar}] {percent:.1f}% '
                             f'({self.current}/{self.total}, {rate:.1f}/s){eta_str}{suffix}')
            sys.stderr.flush()

    def finish(self, message: Optional[str] = None):
        if not self.enabled:
            return
        elapsed = time.time() - self.start_time
        if message:
            sys.stderr.write(f'\r{message} (completed in {elapsed:.1f}s)\n')
        else:
            sys.stderr.write(f'\r{self.prefix}: done, {self.current} in {elapsed:.1f}s\n')
        sys.stderr.flush()
