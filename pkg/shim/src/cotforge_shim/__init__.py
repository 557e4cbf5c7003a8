"""In-sandbox job runner.

Invoked as ``python -m cotforge_shim`` inside each execution subprocess.
Reads one JSON job from stdin, runs the candidate code under self-applied
resource limits with its stdout/stderr captured at the file-descriptor
level, and emits exactly one verdict JSON line followed by one sentinel
line on the original stdout. The candidate can print anything it likes;
nothing it writes can reach the protocol channel.

Exit code is 0 for any candidate outcome (including crashes); nonzero only
for protocol failures such as being unable to write the verdict.

Job fields:
    mode        stdin_stdout | expression_assert | dry_parse | run_test_code
    code        candidate source text
    input       stdin text fed to the candidate (stdin_stdout / run_test_code)
    assertion   assert statement(s), expression_assert mode only
    test_code   generated test source, run_test_code mode only
    sentinel    host-chosen unguessable line echoed after the verdict
    limits      {cpu_time_s, memory_bytes, max_output_bytes}

Verdict fields:
    ok, stdout (truncated to max_output_bytes), stdout_overflow,
    stderr_excerpt, exception_type, elapsed_s
"""

from __future__ import annotations

import io
import json
import os
import sys
import tempfile
import time
import traceback

FALLBACK_SENTINEL = "COTFORGE-SHIM-NO-SENTINEL"
_EXCERPT_LIMIT = 2000

_DEFAULT_LIMITS = {
    "cpu_time_s": 10,
    "memory_bytes": 512 * 1024 * 1024,
    "max_output_bytes": 1024 * 1024,
}

MODES = ("stdin_stdout", "expression_assert", "dry_parse", "run_test_code")


def _apply_limits(limits: dict) -> None:
    """Self-applied resource limits; complements the host's wall-clock kill."""
    try:
        import resource
        import signal

        cpu = max(1, int(limits.get("cpu_time_s", _DEFAULT_LIMITS["cpu_time_s"])))
        resource.setrlimit(resource.RLIMIT_CPU, (cpu, cpu + 1))
        memory = int(limits.get("memory_bytes", _DEFAULT_LIMITS["memory_bytes"]))
        resource.setrlimit(resource.RLIMIT_AS, (memory, memory))
        # Bound file writes (including the fd-level stdout capture) but keep
        # writes failing with EFBIG instead of the default SIGXFSZ kill, so
        # flooding candidates still produce a verdict.
        max_output = int(limits.get("max_output_bytes", _DEFAULT_LIMITS["max_output_bytes"]))
        fsize = max(max_output * 2, 8 * 1024 * 1024)
        resource.setrlimit(resource.RLIMIT_FSIZE, (fsize, fsize))
        signal.signal(signal.SIGXFSZ, signal.SIG_IGN)
    except (ImportError, ValueError, OSError):
        pass


def _deny_network() -> None:
    import socket

    def _denied(*_args, **_kwargs):
        raise OSError("network access is denied in the sandbox")

    socket.socket = _denied  # type: ignore[misc,assignment]
    socket.create_connection = _denied  # type: ignore[assignment]
    socket.socketpair = _denied  # type: ignore[assignment]


def _excerpt(text: str) -> str:
    return text[-_EXCERPT_LIMIT:] if len(text) > _EXCERPT_LIMIT else text


def _execute(job: dict) -> dict:
    """Run the job's mode with candidate stdout/stderr captured."""
    mode = job.get("mode")
    code = job.get("code", "")
    limits = job.get("limits") or {}
    max_output = int(limits.get("max_output_bytes", _DEFAULT_LIMITS["max_output_bytes"]))

    if mode not in MODES:
        return {
            "ok": False,
            "stdout": "",
            "stdout_overflow": False,
            "stderr_excerpt": f"unknown mode {mode!r}",
            "exception_type": "bad_job",
            "elapsed_s": 0.0,
        }

    # Capture all candidate output at the fd level: fd 1/2 point at temp
    # files, so even os.write(1, ...) cannot reach the protocol channel.
    out_cap = tempfile.TemporaryFile()
    err_cap = tempfile.TemporaryFile()
    os.dup2(out_cap.fileno(), 1)
    os.dup2(err_cap.fileno(), 2)

    # Candidate stdin: a temp file dup'd onto fd 0 so raw-fd readers and
    # sys.stdin share one offset.
    in_file = tempfile.TemporaryFile()
    in_file.write(job.get("input", "").encode("utf-8"))
    in_file.seek(0)
    os.dup2(in_file.fileno(), 0)
    sys.stdin = io.TextIOWrapper(os.fdopen(os.dup(0), "rb"), encoding="utf-8")

    _apply_limits(limits)
    _deny_network()

    ok = True
    exception_type: str | None = None
    tb_text = ""
    started = time.monotonic()
    try:
        if mode == "dry_parse":
            compile(code, "<candidate>", "exec")
        else:
            namespace: dict = {"__name__": "__main__"}
            exec(compile(code, "<candidate>", "exec"), namespace)
            if mode == "expression_assert":
                exec(compile(job.get("assertion", ""), "<assertion>", "exec"), namespace)
            elif mode == "run_test_code":
                exec(compile(job.get("test_code", ""), "<tests>", "exec"), namespace)
    except SystemExit as exc:
        if exc.code not in (0, None):
            ok = False
            exception_type = "SystemExit"
            tb_text = f"SystemExit: {exc.code}"
    except BaseException as exc:  # noqa: BLE001 - candidate code may raise anything
        ok = False
        exception_type = type(exc).__name__
        tb_text = traceback.format_exc()
    elapsed = time.monotonic() - started

    try:
        sys.stdout.flush()
    except Exception:
        pass
    try:
        sys.stderr.flush()
    except Exception:
        pass

    out_cap.seek(0)
    raw_out = out_cap.read(max_output + 1)
    overflow = len(raw_out) > max_output
    stdout_text = raw_out[:max_output].decode("utf-8", errors="replace")

    err_cap.seek(0, os.SEEK_END)
    err_size = err_cap.tell()
    err_cap.seek(max(0, err_size - _EXCERPT_LIMIT))
    stderr_text = err_cap.read().decode("utf-8", errors="replace")
    if tb_text:
        stderr_text = (stderr_text + "\n" + tb_text).strip()

    return {
        "ok": ok,
        "stdout": stdout_text,
        "stdout_overflow": overflow,
        "stderr_excerpt": _excerpt(stderr_text),
        "exception_type": exception_type,
        "elapsed_s": round(elapsed, 6),
    }


def run_job(job_text: str, protocol_fd: int) -> int:
    """Process one job; write verdict + sentinel to ``protocol_fd``.

    Returns the process exit code: 0 unless the protocol write itself fails.
    """
    sentinel = FALLBACK_SENTINEL
    try:
        job = json.loads(job_text)
        if not isinstance(job, dict):
            raise ValueError("job must be a JSON object")
        sentinel = str(job.get("sentinel") or FALLBACK_SENTINEL)
        verdict = _execute(job)
    except ValueError:
        verdict = {
            "ok": False,
            "stdout": "",
            "stdout_overflow": False,
            "stderr_excerpt": "unparseable job JSON",
            "exception_type": "bad_job",
            "elapsed_s": 0.0,
        }
    try:
        payload = json.dumps(verdict, ensure_ascii=False) + "\n" + sentinel + "\n"
        os.write(protocol_fd, payload.encode("utf-8"))
        return 0
    except OSError:
        return 3


def main() -> int:
    # Keep the real stdout for the protocol before any redirection happens.
    protocol_fd = os.dup(1)
    job_text = sys.stdin.read()
    return run_job(job_text, protocol_fd)
