/* tslint:disable */
/* eslint-disable */

/**
 * Risk difference, McNemar test and gamma sensitivity for a pair table.
 */
export function analyzeTable(n00: number, n01: number, n10: number, n11: number, alpha: number): string;

/**
 * Test that at most `delta0` treated events are attributable to treatment.
 */
export function equivalenceTest(n00: number, n01: number, n10: number, n11: number, delta0: number, gamma: number, alpha: number): string;

/**
 * Neighborhood selection on a synthetic data set; a negative `honest`
 * means the whole frame is honest.
 */
export function selectSynthetic(n: number, seed: number, honest: number, p_star: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly analyzeTable: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly equivalenceTest: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly selectSynthetic: (a: number, b: number, c: number, d: number) => [number, number, number, number];
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
