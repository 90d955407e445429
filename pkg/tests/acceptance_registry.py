"""Registry of acceptance outcomes shared between the suite and the terminal summary."""

import json
from pathlib import Path

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
REPORT_PATH = Path(__file__).resolve().parent.parent / "acceptance_report.json"


def record(number: int, passed: bool, detail: str, extra: dict | None = None) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    line = f"[criterion {number:2d}] {'PASS' if passed else 'FAIL'}  {detail}"
    print(line)
    report = json.loads(REPORT_PATH.read_text()) if REPORT_PATH.exists() else {}
    report[str(number)] = {"passed": bool(passed), "detail": detail, **(extra or {})}
    REPORT_PATH.write_text(json.dumps(report, indent=2, sort_keys=True))
