"""Pass/fail lines of the acceptance criteria, printed in the terminal summary."""
LINES: list[str] = []


def record(number: int, name: str, passed: bool, detail: str) -> None:
    LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {name} -- {detail}")
