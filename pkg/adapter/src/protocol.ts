/**
 * Wire protocol types shared with the trainer side.
 *
 * One JSON object per line. Requests carry Angstrom positions and ask for
 * some of "energy" | "forces" | "dipole"; responses echo the id and report
 * eV / eV/Å / Debye. Anything unservable becomes {id, error}.
 */

export interface CalcRequest {
  id: number;
  elements: string[];
  positions_ang: number[][];
  properties: string[];
}

export interface CalcResponse {
  id: number;
  energy_ev?: number;
  forces_ev_ang?: number[][];
  dipole_debye?: number[];
  error?: string;
}

export const SUPPORTED_PROPERTIES = new Set(["energy", "forces", "dipole"]);

export const KNOWN_ELEMENTS = new Set(["H", "C", "N", "O", "S"]);

export function parseRequest(line: string): CalcRequest {
  let raw: unknown;
  try {
    raw = JSON.parse(line);
  } catch (err) {
    throw new ProtocolError(-1, `malformed JSON request: ${(err as Error).message}`);
  }
  const obj = raw as Record<string, unknown>;
  const id = typeof obj.id === "number" ? obj.id : -1;
  const elements = obj.elements;
  const positions = obj.positions_ang;
  if (!Array.isArray(elements) || elements.some((e) => typeof e !== "string")) {
    throw new ProtocolError(id, "elements must be a list of symbols");
  }
  if (
    !Array.isArray(positions) ||
    positions.length !== elements.length ||
    positions.some((row) => !Array.isArray(row) || row.length !== 3)
  ) {
    throw new ProtocolError(id, "positions_ang must be one 3-vector per element");
  }
  for (const sym of elements as string[]) {
    if (!KNOWN_ELEMENTS.has(sym)) {
      throw new ProtocolError(id, `unknown element symbol ${sym}`);
    }
  }
  const properties = Array.isArray(obj.properties) ? (obj.properties as string[]) : ["energy"];
  for (const p of properties) {
    if (!SUPPORTED_PROPERTIES.has(p)) {
      throw new ProtocolError(id, `unsupported properties: ${p}`);
    }
  }
  return {
    id,
    elements: elements as string[],
    positions_ang: (positions as number[][]).map((row) => row.map(Number)),
    properties,
  };
}

export class ProtocolError extends Error {
  constructor(public readonly id: number, message: string) {
    super(message);
  }
}
