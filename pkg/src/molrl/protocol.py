"""JSON-lines calculator protocol: client, schema checks, conformance replay.

One request object per line on the adapter's stdin, one response per line
on its stdout. Responses must echo the request id in order. All quantities
on the wire are eV / Angstrom / Debye.
"""

from __future__ import annotations

import json
import os
import select
import shlex
import subprocess
from dataclasses import dataclass, field

import numpy as np

from .chem import Canvas, Element, element
from .energy import CalculatorError, CalculatorResult

__all__ = [
    "ExternalCalculator",
    "validate_response",
    "run_conformance_check",
    "ConformanceReport",
]

DEFAULT_TIMEOUT = 60.0


def _canvas_request(req_id: int, elements: list[str], positions, properties) -> dict:
    return {
        "id": req_id,
        "elements": list(elements),
        "positions_ang": [[float(v) for v in row] for row in positions],
        "properties": list(properties),
    }


def validate_response(resp: object, req: dict) -> list[str]:
    """Return a list of violation messages (empty when conformant)."""
    problems = []
    if not isinstance(resp, dict):
        return [f"response is not a JSON object: {resp!r}"]
    if "error" in resp and resp["error"]:
        # an explicit error object only needs the id echo
        if resp.get("id") != req["id"]:
            problems.append(f"error response id {resp.get('id')!r} != request id {req['id']}")
        return problems
    if resp.get("id") != req["id"]:
        problems.append(f"response id {resp.get('id')!r} != request id {req['id']}")
    if "energy" in req["properties"]:
        e = resp.get("energy_ev")
        if not isinstance(e, (int, float)) or not np.isfinite(e):
            problems.append(f"missing or non-finite energy_ev: {e!r}")
    n = len(req["elements"])
    if "forces" in req["properties"]:
        f = resp.get("forces_ev_ang")
        arr = np.asarray(f, dtype=float) if f is not None else None
        if arr is None or arr.shape != (n, 3) or not np.all(np.isfinite(arr)):
            problems.append(f"forces_ev_ang missing or not a finite ({n}, 3) array")
    if "dipole" in req["properties"]:
        d = resp.get("dipole_debye")
        arr = np.asarray(d, dtype=float) if d is not None else None
        if arr is None or arr.shape != (3,) or not np.all(np.isfinite(arr)):
            problems.append("dipole_debye missing or not a finite 3-vector")
    return problems


class ExternalCalculator:
    """Client for an adapter subprocess speaking the JSON-lines protocol.

    Each calculator owns exactly one adapter process; isolated-atom
    energies are computed once per element and cached.
    """

    name = "external"
    supports_dipole = True

    def __init__(self, command: str | list[str], timeout: float = DEFAULT_TIMEOUT):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self._proc: subprocess.Popen | None = None
        self._next_id = 0
        self._isolated: dict[str, float] = {}

    def _ensure_started(self):
        if self._proc is not None:
            if self._proc.poll() is None:
                return
            # the adapter died since the last call: surface the error once;
            # the next call starts a fresh process
            code = self._proc.poll()
            self._proc = None
            raise CalculatorError(f"adapter process died (exit code {code})")
        self._proc = subprocess.Popen(
            self.command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            bufsize=1,
        )
        self._buffer = ""

    def close(self):
        proc, self._proc = self._proc, None
        if proc is None or proc.poll() is not None:
            return
        try:
            proc.stdin.close()
        except OSError:
            pass
        try:
            proc.wait(timeout=0.5)
        except subprocess.TimeoutExpired:
            proc.kill()
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                pass

    def __enter__(self):
        self._ensure_started()
        return self

    def __exit__(self, *exc):
        self.close()

    def _read_line(self) -> str:
        fd = self._proc.stdout.fileno()
        while "\n" not in self._buffer:
            ready, _, _ = select.select([fd], [], [], self.timeout)
            if not ready:
                self.close()
                raise CalculatorError(
                    f"adapter timed out after {self.timeout} s: {' '.join(self.command)}"
                )
            chunk = os.read(fd, 65536).decode("utf-8")
            if chunk == "":
                code = self._proc.poll()
                self.close()
                raise CalculatorError(f"adapter exited (code {code}) mid-request")
            self._buffer += chunk
        line, self._buffer = self._buffer.split("\n", 1)
        return line

    def _roundtrip(self, req: dict) -> dict:
        self._ensure_started()
        try:
            self._proc.stdin.write(json.dumps(req) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            self.close()
            raise CalculatorError(f"adapter pipe closed: {exc}") from exc
        text = self._read_line()
        try:
            resp = json.loads(text)
        except json.JSONDecodeError as exc:
            self.close()
            raise CalculatorError(f"malformed adapter response {text!r}") from exc
        if resp.get("id") != req["id"]:
            self.close()
            raise CalculatorError(
                f"out-of-order adapter response: got id {resp.get('id')!r},"
                f" expected {req['id']}"
            )
        if resp.get("error"):
            raise CalculatorError(f"adapter error: {resp['error']}")
        problems = validate_response(resp, req)
        if problems:
            self.close()
            raise CalculatorError("; ".join(problems))
        return resp

    def calculate(
        self, canvas: Canvas, forces: bool = True, dipole: bool = False
    ) -> CalculatorResult:
        properties = ["energy"]
        if forces:
            properties.append("forces")
        if dipole:
            properties.append("dipole")
        self._next_id += 1
        req = _canvas_request(
            self._next_id,
            [el.symbol for el in canvas.elements],
            canvas.positions,
            properties,
        )
        resp = self._roundtrip(req)
        result = CalculatorResult(float(resp["energy_ev"]))
        if forces:
            result.forces = np.asarray(resp["forces_ev_ang"], dtype=np.float64)
        if dipole:
            result.dipole = np.asarray(resp["dipole_debye"], dtype=np.float64)
        return result

    def isolated_energy(self, el: Element) -> float:
        if el.symbol not in self._isolated:
            one = Canvas([el], [[0.0, 0.0, 0.0]])
            self._isolated[el.symbol] = self.calculate(one, forces=False).energy
        return self._isolated[el.symbol]


@dataclass
class ConformanceReport:
    passed: bool
    checks: int
    violations: list[str] = field(default_factory=list)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"protocol conformance: {status} ({self.checks} checks)"]
        lines.extend(f"  violation: {v}" for v in self.violations)
        return "\n".join(lines)


GOLDEN_REQUESTS: list[dict] = [
    _canvas_request(1, ["H", "H"], [[0, 0, 0], [0.74, 0, 0]], ["energy"]),
    _canvas_request(2, ["H", "H"], [[0, 0, 0], [0.74, 0, 0]], ["energy", "forces"]),
    _canvas_request(
        3,
        ["O", "H", "H"],
        [[0, 0, 0], [0.96, 0, 0], [-0.24, 0.93, 0]],
        ["energy", "forces", "dipole"],
    ),
    _canvas_request(4, ["C"], [[0, 0, 0]], ["energy"]),
]


def run_conformance_check(
    command: str | list[str], timeout: float = 10.0, extra_requests=None
) -> ConformanceReport:
    """Replay golden requests against an adapter and validate every reply.

    Also checks pipelining: the last two requests are written back-to-back
    before any response is read, and the replies must come back in order.
    """
    cmd = shlex.split(command) if isinstance(command, str) else list(command)
    requests = GOLDEN_REQUESTS + list(extra_requests or [])
    violations: list[str] = []
    checks = 0
    proc = subprocess.Popen(
        cmd,
        stdin=subprocess.PIPE,
        stdout=subprocess.PIPE,
        stderr=subprocess.DEVNULL,
        text=True,
        bufsize=1,
    )

    def read_response(req) -> dict | None:
        fd = proc.stdout.fileno()
        buf = ""
        while "\n" not in buf:
            ready, _, _ = select.select([fd], [], [], timeout)
            if not ready:
                violations.append(f"timeout waiting for response to id {req['id']}")
                return None
            chunk = os.read(fd, 65536).decode("utf-8")
            if chunk == "":
                violations.append(f"adapter closed stdout before answering id {req['id']}")
                return None
            buf += chunk
        line = buf.split("\n", 1)[0]
        try:
            return json.loads(line)
        except json.JSONDecodeError:
            violations.append(f"unparseable response line for id {req['id']}: {line!r}")
            return None

    try:
        # sequential replay
        for req in requests[:-2]:
            checks += 1
            proc.stdin.write(json.dumps(req) + "\n")
            proc.stdin.flush()
            resp = read_response(req)
            if resp is not None:
                violations.extend(
                    f"id {req['id']}: {p}" for p in validate_response(resp, req)
                )
        # pipelined pair: in-order id echo required
        pair = requests[-2:]
        for req in pair:
            proc.stdin.write(json.dumps(req) + "\n")
        proc.stdin.flush()
        for req in pair:
            checks += 1
            resp = read_response(req)
            if resp is None:
                continue
            if resp.get("id") != req["id"]:
                violations.append(
                    f"pipelined response out of order: got {resp.get('id')!r},"
                    f" expected {req['id']}"
                )
            else:
                violations.extend(
                    f"id {req['id']}: {p}" for p in validate_response(resp, req)
                )
    finally:
        try:
            proc.stdin.close()
        except OSError:
            pass
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            proc.kill()
    return ConformanceReport(not violations, checks, violations)
