/**
 * File-based driver for an `xtb` binary (GFN2 Hamiltonian).
 *
 * Per request: write the geometry as XYZ into a scratch directory, run
 * `xtb geom.xyz --gfn 2 [--grad]`, and parse `xtbout.json` (energy,
 * dipole) plus the Turbomole-format `gradient` file. Everything stays in
 * atomic units here; the adapter converts.
 */

import { spawnSync } from "child_process";
import * as fs from "fs";
import * as os from "os";
import * as path from "path";

import { Backend, BackendError, BackendRequest, BackendResult } from "./backend";

export class XtbCliBackend implements Backend {
  readonly name = "xtb-cli";

  constructor(private readonly timeoutMs: number) {}

  compute(req: BackendRequest): Promise<BackendResult> {
    const scratch = fs.mkdtempSync(path.join(os.tmpdir(), "xtb-adapter-"));
    try {
      const xyz = [
        String(req.elements.length),
        "adapter request",
        ...req.elements.map(
          (sym, i) =>
            `${sym} ${req.positions_ang[i][0].toFixed(10)} ` +
            `${req.positions_ang[i][1].toFixed(10)} ${req.positions_ang[i][2].toFixed(10)}`
        ),
      ].join("\n");
      fs.writeFileSync(path.join(scratch, "geom.xyz"), xyz + "\n");
      const args = ["geom.xyz", "--gfn", "2", "--json"];
      if (req.want_gradient) {
        args.push("--grad");
      }
      const run = spawnSync("xtb", args, {
        cwd: scratch,
        timeout: this.timeoutMs,
        stdio: ["ignore", "ignore", "ignore"],
      });
      if (run.error) {
        throw new BackendError(`xtb failed to run: ${run.error.message}`);
      }
      if (run.status !== 0) {
        throw new BackendError(`xtb exited with status ${run.status}`);
      }
      const result: BackendResult = { energy_hartree: NaN };
      const jsonPath = path.join(scratch, "xtbout.json");
      if (fs.existsSync(jsonPath)) {
        const parsed = JSON.parse(fs.readFileSync(jsonPath, "utf-8"));
        result.energy_hartree = Number(
          parsed["total energy"] ?? parsed["total_energy"] ?? parsed.energy
        );
        if (req.want_dipole && Array.isArray(parsed.dipole)) {
          result.dipole_au = parsed.dipole.map(Number);
        }
      }
      if (!Number.isFinite(result.energy_hartree)) {
        result.energy_hartree = this.energyFromEnergyFile(scratch);
      }
      if (req.want_gradient) {
        result.gradient_hartree_bohr = this.parseGradientFile(
          path.join(scratch, "gradient"),
          req.elements.length
        );
      }
      if (req.want_dipole && !result.dipole_au) {
        throw new BackendError("xtb output carried no dipole vector");
      }
      return Promise.resolve(result);
    } finally {
      fs.rmSync(scratch, { recursive: true, force: true });
    }
  }

  private energyFromEnergyFile(scratch: string): number {
    const energyPath = path.join(scratch, "energy");
    if (!fs.existsSync(energyPath)) {
      throw new BackendError("xtb produced neither xtbout.json nor an energy file");
    }
    const lines = fs.readFileSync(energyPath, "utf-8").trim().split("\n");
    // Turbomole energy file: "$energy", data rows "cycle  E  ...", "$end"
    for (let i = lines.length - 1; i >= 0; i--) {
      const fields = lines[i].trim().split(/\s+/);
      if (fields.length >= 2 && !fields[0].startsWith("$")) {
        const value = Number(fields[1]);
        if (Number.isFinite(value)) return value;
      }
    }
    throw new BackendError("could not parse the Turbomole energy file");
  }

  private parseGradientFile(gradientPath: string, nAtoms: number): number[][] {
    if (!fs.existsSync(gradientPath)) {
      throw new BackendError("xtb produced no gradient file despite --grad");
    }
    const lines = fs
      .readFileSync(gradientPath, "utf-8")
      .split("\n")
      .map((l) => l.trim())
      .filter((l) => l.length > 0 && !l.startsWith("$"));
    // layout: cycle line, nAtoms coordinate rows, nAtoms gradient rows
    const gradRows = lines.slice(-nAtoms);
    if (gradRows.length !== nAtoms) {
      throw new BackendError("gradient file shorter than the atom count");
    }
    return gradRows.map((row) => {
      const fields = row.replace(/D([+-]\d)/g, "E$1").split(/\s+/).map(Number);
      if (fields.length < 3 || fields.some((v) => !Number.isFinite(v))) {
        throw new BackendError(`unparseable gradient row: ${row}`);
      }
      return fields.slice(0, 3);
    });
  }

  close(): void {
    // stateless: every request runs in its own scratch directory
  }
}
