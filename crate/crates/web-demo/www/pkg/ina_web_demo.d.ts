/* tslint:disable */
/* eslint-disable */

/**
 * Mean JCT and utilization of every policy on a small mixed A/B workload.
 */
export function compare_policies(jobs: number, workers: number, packets: number, loss: number, seeds: number): string;

/**
 * Raw score and 8-bit code of both layers of `model` as the remaining time
 * sweeps 1 ms to 1 s, plus the downgrade chain of the top code.
 */
export function priority_curve(model: string, mode: string, k: number, p_ref: number): string;

/**
 * Names and one-line summaries of the scripted scenarios.
 */
export function scenario_names(): string;

/**
 * Runs one scripted scenario and returns its trace rows.
 */
export function scenario_trace(name: string): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly compare_policies: (a: number, b: number, c: number, d: number, e: number) => [number, number];
    readonly priority_curve: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number];
    readonly scenario_names: () => [number, number];
    readonly scenario_trace: (a: number, b: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
