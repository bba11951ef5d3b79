/**
 * Backend resolution and drivers.
 *
 * A backend answers in atomic units (Hartree, Hartree/Bohr, a.u. dipole);
 * the adapter owns all unit conversion. Two drivers exist: a generic
 * subprocess speaking a JSON-lines inner protocol (used by the tests via a
 * stub, and by any custom bridge), and a file-based driver for an `xtb`
 * binary found on PATH.
 */

import { spawn, spawnSync, ChildProcessByStdio } from "child_process";
import { Readable, Writable } from "stream";

type PipedProcess = ChildProcessByStdio<Writable, Readable, null>;

export interface BackendResult {
  energy_hartree: number;
  gradient_hartree_bohr?: number[][];
  dipole_au?: number[];
}

export interface BackendRequest {
  elements: string[];
  positions_ang: number[][];
  want_gradient: boolean;
  want_dipole: boolean;
}

export interface Backend {
  readonly name: string;
  compute(req: BackendRequest): Promise<BackendResult>;
  close(): void;
}

export class BackendError extends Error {}

/** Subprocess speaking the inner JSON-lines protocol in atomic units. */
export class SubprocessBackend implements Backend {
  readonly name: string;
  private proc: PipedProcess | null = null;
  private buffer = "";
  private nextId = 0;
  private waiter: ((line: string) => void) | null = null;

  constructor(private readonly command: string[], private readonly timeoutMs: number) {
    this.name = `subprocess:${command[0]}`;
  }

  private ensureStarted(): PipedProcess {
    if (this.proc && this.proc.exitCode === null && !this.proc.killed) {
      return this.proc;
    }
    const proc = spawn(this.command[0], this.command.slice(1), {
      stdio: ["pipe", "pipe", "ignore"],
    });
    this.proc = proc;
    this.buffer = "";
    proc.stdout.setEncoding("utf-8");
    proc.stdout.on("data", (chunk: string) => {
      this.buffer += chunk;
      let idx;
      while ((idx = this.buffer.indexOf("\n")) >= 0 && this.waiter) {
        const line = this.buffer.slice(0, idx);
        this.buffer = this.buffer.slice(idx + 1);
        const resolve = this.waiter;
        this.waiter = null;
        resolve(line);
      }
    });
    return proc;
  }

  private readLine(): Promise<string> {
    const idx = this.buffer.indexOf("\n");
    if (idx >= 0) {
      const line = this.buffer.slice(0, idx);
      this.buffer = this.buffer.slice(idx + 1);
      return Promise.resolve(line);
    }
    return new Promise<string>((resolve, reject) => {
      const timer = setTimeout(() => {
        this.waiter = null;
        this.close();
        reject(new BackendError(`backend timed out after ${this.timeoutMs} ms`));
      }, this.timeoutMs);
      const onExit = () => {
        clearTimeout(timer);
        this.waiter = null;
        reject(new BackendError("backend exited mid-request"));
      };
      this.proc?.once("exit", onExit);
      this.waiter = (line) => {
        clearTimeout(timer);
        this.proc?.removeListener("exit", onExit);
        resolve(line);
      };
    });
  }

  async compute(req: BackendRequest): Promise<BackendResult> {
    const proc = this.ensureStarted();
    const id = ++this.nextId;
    const properties = ["energy"];
    if (req.want_gradient) properties.push("gradient");
    if (req.want_dipole) properties.push("dipole");
    const payload = {
      id,
      elements: req.elements,
      positions_ang: req.positions_ang,
      properties,
    };
    try {
      proc.stdin.write(JSON.stringify(payload) + "\n");
    } catch (err) {
      this.close();
      throw new BackendError(`backend pipe closed: ${(err as Error).message}`);
    }
    const line = await this.readLine();
    let resp: Record<string, unknown>;
    try {
      resp = JSON.parse(line);
    } catch {
      this.close();
      throw new BackendError(`unparseable backend reply: ${line}`);
    }
    if (resp.error) {
      throw new BackendError(String(resp.error));
    }
    if (resp.id !== id) {
      this.close();
      throw new BackendError(`backend replied with id ${resp.id}, expected ${id}`);
    }
    const energy = resp.energy_hartree;
    if (typeof energy !== "number" || !Number.isFinite(energy)) {
      throw new BackendError(`backend returned no finite energy_hartree`);
    }
    const result: BackendResult = { energy_hartree: energy };
    if (req.want_gradient) {
      const grad = resp.gradient_hartree_bohr as number[][] | undefined;
      if (!Array.isArray(grad) || grad.length !== req.elements.length) {
        throw new BackendError("backend returned no usable gradient_hartree_bohr");
      }
      result.gradient_hartree_bohr = grad;
    }
    if (req.want_dipole) {
      const dip = resp.dipole_au as number[] | undefined;
      if (!Array.isArray(dip) || dip.length !== 3) {
        throw new BackendError("backend returned no usable dipole_au");
      }
      result.dipole_au = dip;
    }
    return result;
  }

  close(): void {
    if (this.proc && this.proc.exitCode === null) {
      this.proc.stdin.end();
      this.proc.kill();
    }
    this.proc = null;
  }
}

export interface ResolveOptions {
  backendCommand?: string[];
  timeoutMs: number;
}

/**
 * Resolution order: explicit --backend command, then $MOLRL_XTB_BACKEND,
 * then an `xtb` binary on PATH. Returns null when nothing is resolvable.
 */
export function resolveBackend(opts: ResolveOptions): Backend | null {
  if (opts.backendCommand && opts.backendCommand.length > 0) {
    return new SubprocessBackend(opts.backendCommand, opts.timeoutMs);
  }
  const fromEnv = process.env.MOLRL_XTB_BACKEND;
  if (fromEnv && fromEnv.trim().length > 0) {
    return new SubprocessBackend(fromEnv.trim().split(/\s+/), opts.timeoutMs);
  }
  const probe = spawnSync("xtb", ["--version"], { stdio: "ignore" });
  if (!probe.error && probe.status === 0) {
    // lazy import keeps the common path free of fs/tmp machinery
    const { XtbCliBackend } = require("./xtb");
    return new XtbCliBackend(opts.timeoutMs);
  }
  return null;
}
