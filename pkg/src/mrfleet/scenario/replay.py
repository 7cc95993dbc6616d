"""Determinism audit: byte-compare two ordered message logs."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path


@dataclass(frozen=True)
class ReplayResult:
    equal: bool
    first_divergence: int | None = None  # 1-based line number
    detail: str = ""

    def __str__(self) -> str:
        if self.equal:
            return "equal"
        return f"first divergence at record {self.first_divergence}: {self.detail}"


def replay_check(log_a: str | Path, log_b: str | Path) -> ReplayResult:
    """Compare two run logs record by record; report the first mismatch."""
    with Path(log_a).open("rb") as fa, Path(log_b).open("rb") as fb:
        line_no = 0
        while True:
            line_no += 1
            a = fa.readline()
            b = fb.readline()
            if not a and not b:
                return ReplayResult(equal=True)
            if a != b:
                def show(raw: bytes) -> str:
                    if not raw:
                        return "<end of log>"
                    text = raw.decode("utf-8", "replace").rstrip("\n")
                    return text if len(text) <= 120 else text[:117] + "..."

                return ReplayResult(
                    equal=False,
                    first_divergence=line_no,
                    detail=f"a={show(a)!r} b={show(b)!r}",
                )
