/* tslint:disable */
/* eslint-disable */

/**
 * Token correspondences from view 0 to view 1 as JSON. A negative `tau`
 * disables the cycle check.
 */
export function correspondences(seed: number, res: number, spread_deg: number, tokens: number, tau: number): string;

/**
 * Precision against ρ for noisy ground-truth descriptors and random matches, as JSON.
 */
export function probeCurve(seed: number, scenes: number, res: number, noise_m: number): string;

/**
 * RGBA bytes of both views, `2 × res × res × 4`.
 */
export function renderViews(seed: number, res: number, spread_deg: number): Uint8Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly correspondences: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly probeCurve: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly renderViews: (a: number, b: number, c: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
