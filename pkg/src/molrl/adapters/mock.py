"""Mock stdio adapter: serves the JSON-lines protocol with surrogate values.

Used by the test suite and the protocol-check command so protocol work
never needs a real quantum chemistry backend. Run as:

    python -m molrl.adapters.mock
"""

from __future__ import annotations

import json
import sys

from ..chem import Canvas, element
from ..energy import SurrogateCalculator

SUPPORTED_PROPERTIES = {"energy", "forces", "dipole"}


def handle_request(req: dict, calc: SurrogateCalculator) -> dict:
    req_id = req.get("id", -1)
    try:
        symbols = req["elements"]
        positions = req["positions_ang"]
        properties = req.get("properties", ["energy"])
    except (KeyError, TypeError) as exc:
        return {"id": req_id, "error": f"bad request shape: {exc}"}
    unsupported = [p for p in properties if p not in SUPPORTED_PROPERTIES]
    if unsupported:
        return {"id": req_id, "error": f"unsupported properties: {unsupported}"}
    try:
        canvas = Canvas([element(s) for s in symbols], positions)
        result = calc.calculate(
            canvas, forces="forces" in properties, dipole="dipole" in properties
        )
    except Exception as exc:
        return {"id": req_id, "error": str(exc)}
    resp = {"id": req_id, "energy_ev": result.energy}
    if result.forces is not None:
        resp["forces_ev_ang"] = result.forces.tolist()
    if result.dipole is not None:
        resp["dipole_debye"] = result.dipole.tolist()
    return resp


def serve(stdin=None, stdout=None) -> None:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    calc = SurrogateCalculator(dipole_stub=True)
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            req = json.loads(line)
        except json.JSONDecodeError as exc:
            resp = {"id": -1, "error": f"malformed JSON request: {exc}"}
        else:
            resp = handle_request(req, calc)
        stdout.write(json.dumps(resp) + "\n")
        stdout.flush()


if __name__ == "__main__":
    serve()
