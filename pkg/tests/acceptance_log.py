"""Collects one verdict line per acceptance criterion for the run summary."""

RESULTS: dict[int, str] = {}


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    RESULTS[number] = line
    print(line)
    assert ok, line
