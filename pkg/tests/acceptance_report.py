"""Collects one verdict line per acceptance criterion for the terminal summary."""

RESULTS: dict[str, tuple[bool, str]] = {}


def record(key: str, passed: bool, detail: str) -> bool:
    RESULTS[key] = (bool(passed), detail)
    print(line(key))
    return passed


def line(key: str) -> str:
    passed, detail = RESULTS[key]
    return f"{key} {'PASS' if passed else 'FAIL'}: {detail}"


def lines() -> list[str]:
    return [line(k) for k in sorted(RESULTS)]
