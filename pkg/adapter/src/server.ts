/**
 * Request loop: one response line per request line, ids echoed in order.
 *
 * Isolated single atoms are the reference energies of the atomization
 * reward, so their results are cached per element after the first hit.
 * Backend failures answer {id, error} and the loop keeps serving.
 */

import * as readline from "readline";
import { Writable } from "stream";

import { Backend, BackendError } from "./backend";
import { CalcResponse, ProtocolError, parseRequest } from "./protocol";
import { dipoleToDebye, energyToEv, gradientToForces } from "./units";

export class AdapterServer {
  private isolatedCache = new Map<string, number>();

  constructor(private readonly backend: Backend) {}

  async handleLine(line: string): Promise<CalcResponse> {
    let req;
    try {
      req = parseRequest(line);
    } catch (err) {
      if (err instanceof ProtocolError) {
        return { id: err.id, error: err.message };
      }
      return { id: -1, error: String(err) };
    }
    const wantForces = req.properties.includes("forces");
    const wantDipole = req.properties.includes("dipole");

    const isIsolatedAtom = req.elements.length === 1 && !wantForces && !wantDipole;
    if (isIsolatedAtom) {
      const cached = this.isolatedCache.get(req.elements[0]);
      if (cached !== undefined) {
        return { id: req.id, energy_ev: cached };
      }
    }

    try {
      const result = await this.backend.compute({
        elements: req.elements,
        positions_ang: req.positions_ang,
        want_gradient: wantForces,
        want_dipole: wantDipole,
      });
      const resp: CalcResponse = { id: req.id, energy_ev: energyToEv(result.energy_hartree) };
      if (wantForces && result.gradient_hartree_bohr) {
        resp.forces_ev_ang = gradientToForces(result.gradient_hartree_bohr);
      }
      if (wantDipole && result.dipole_au) {
        resp.dipole_debye = dipoleToDebye(result.dipole_au);
      }
      if (isIsolatedAtom) {
        this.isolatedCache.set(req.elements[0], resp.energy_ev!);
      }
      return resp;
    } catch (err) {
      const message = err instanceof BackendError ? err.message : String(err);
      return { id: req.id, error: message };
    }
  }

  /** Serve until the input stream ends. */
  serve(input: NodeJS.ReadableStream, output: Writable): Promise<void> {
    const rl = readline.createInterface({ input, crlfDelay: Infinity });
    let chain: Promise<void> = Promise.resolve();
    return new Promise((resolve) => {
      rl.on("line", (line) => {
        if (line.trim().length === 0) {
          return;
        }
        // serialize responses so ids always come back in request order
        chain = chain.then(async () => {
          const resp = await this.handleLine(line);
          output.write(JSON.stringify(resp) + "\n");
        });
      });
      rl.on("close", () => {
        void chain.then(() => resolve());
      });
    });
  }
}
