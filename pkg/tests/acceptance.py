"""PASS/FAIL registry for the acceptance criteria, printed at the end of the run."""

import functools
import time

RESULTS: dict[int, tuple[str, str, str]] = {}


def criterion(number: int, title: str):
    """Record the wrapped test's outcome (and assertion message) under ``number``."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.monotonic()
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                RESULTS[number] = ("FAIL", title, f"{time.monotonic() - t0:.1f}s; {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}")
                raise
            RESULTS[number] = ("PASS", title, f"{time.monotonic() - t0:.1f}s" + (f"; {detail}" if detail else ""))

        return run

    return wrap


def summary_lines() -> list[str]:
    return [f"criterion {n}: {status} {title} ({detail})" for n, (status, title, detail) in sorted(RESULTS.items())]
