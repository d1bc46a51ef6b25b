"""Minimal snippet runner used by the test suite.

argv: <snippet path> <timeout seconds>. Runs the snippet in a fresh
namespace and prints one JSON report line on stdout.
"""
import contextlib
import io
import json
import sys
import time
import traceback


def main():
    path = sys.argv[1]
    with open(path) as f:
        source = f.read()
    out, err = io.StringIO(), io.StringIO()
    started = time.monotonic()
    ok = True
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        try:
            exec(compile(source, path, "exec"), {"__name__": "__main__"})
        except BaseException:
            ok = False
            traceback.print_exc()
    report = {
        "ok": ok,
        "stdout": out.getvalue(),
        "stderr": err.getvalue(),
        "duration_ms": int((time.monotonic() - started) * 1000),
    }
    sys.stdout.write("\n" + json.dumps(report) + "\n")


if __name__ == "__main__":
    main()
