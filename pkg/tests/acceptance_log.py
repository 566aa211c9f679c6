"""Collects one PASS/FAIL line per acceptance criterion."""

_lines = {}


def record(number, ok, detail):
    _lines[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    return ok


def lines():
    return [_lines[k] for k in sorted(_lines)]
