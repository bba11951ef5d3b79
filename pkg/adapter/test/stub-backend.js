#!/usr/bin/env node
/**
 * Deterministic test backend speaking the inner protocol in atomic units.
 *
 * Energy: per-element reference values plus a smooth pair attraction
 * phi(r) = -a / (1 + r^2), analytic gradient, fixed-charge dipole. Not
 * physics; shaped so shorter bonds score lower and everything is finite.
 */

const readline = require("readline");

const A = 0.05; // Hartree
const BOHR = 0.529177210903; // Angstrom per Bohr
const E0 = { H: -0.5, C: -37.8, N: -54.5, O: -75.0, S: -398.0 };
const CHARGE = { H: 0.05, C: 0.0, N: -0.1, O: -0.15, S: -0.05 };

function compute(elements, positions, properties) {
  const n = elements.length;
  let energy = 0;
  for (const sym of elements) {
    if (!(sym in E0)) throw new Error(`stub backend: unknown element ${sym}`);
    energy += E0[sym];
  }
  const grad = Array.from({ length: n }, () => [0, 0, 0]);
  for (let i = 0; i < n; i++) {
    for (let j = i + 1; j < n; j++) {
      const d = [0, 1, 2].map((k) => positions[i][k] - positions[j][k]);
      const r = Math.hypot(...d);
      energy += -A / (1 + r * r);
      const dphi = (2 * A * r) / Math.pow(1 + r * r, 2); // dE/dr, Hartree/Angstrom
      for (let k = 0; k < 3; k++) {
        const u = d[k] / r;
        grad[i][k] += dphi * u * BOHR; // Hartree/Bohr
        grad[j][k] -= dphi * u * BOHR;
      }
    }
  }
  const out = { energy_hartree: energy };
  if (properties.includes("gradient")) {
    out.gradient_hartree_bohr = grad;
  }
  if (properties.includes("dipole")) {
    const centroid = [0, 1, 2].map(
      (k) => positions.reduce((acc, p) => acc + p[k], 0) / n
    );
    out.dipole_au = [0, 1, 2].map((k) =>
      positions.reduce((acc, p, i) => acc + (CHARGE[elements[i]] * (p[k] - centroid[k])) / BOHR, 0)
    );
  }
  return out;
}

const rl = readline.createInterface({ input: process.stdin });
rl.on("line", (line) => {
  if (!line.trim()) return;
  let resp;
  try {
    const req = JSON.parse(line);
    resp = { id: req.id, ...compute(req.elements, req.positions_ang, req.properties) };
  } catch (err) {
    resp = { id: -1, error: String(err) };
  }
  process.stdout.write(JSON.stringify(resp) + "\n");
});
