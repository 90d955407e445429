import torch

from acceptance_registry import ACCEPTANCE, REPORT_PATH

torch.set_num_threads(1)


def pytest_sessionstart(session):
    # the report only ever describes the current run
    REPORT_PATH.unlink(missing_ok=True)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[criterion {n:2d}] {'PASS' if ok else 'FAIL'}  {detail}")
