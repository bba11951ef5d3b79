/** Fixed unit conversions between backend atomic units and the wire. */

export const HARTREE_TO_EV = 27.211386245988;
export const BOHR_TO_ANGSTROM = 0.529177210903;
export const HARTREE_PER_BOHR_TO_EV_PER_ANGSTROM = HARTREE_TO_EV / BOHR_TO_ANGSTROM;
export const AU_TO_DEBYE = 2.541746473;

export function energyToEv(hartree: number): number {
  return hartree * HARTREE_TO_EV;
}

/** Backend gradients (Hartree/Bohr) become forces (eV/Å): F = -grad. */
export function gradientToForces(gradient: number[][]): number[][] {
  return gradient.map((row) => row.map((g) => -g * HARTREE_PER_BOHR_TO_EV_PER_ANGSTROM));
}

export function dipoleToDebye(au: number[]): number[] {
  return au.map((v) => v * AU_TO_DEBYE);
}
