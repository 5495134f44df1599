/* tslint:disable */
/* eslint-disable */

/**
 * Knowledge bank ids as a JSON array.
 */
export function bankIds(): string;

/**
 * Case ids offered by the demo, in index order, as a JSON array.
 */
export function caseIds(): string;

export function retrieve(bank_id: string, query: string, k: number): string;

export function runEpisode(case_index: number, seed: bigint, preset: string): string;

export function scorePlan(predicted: string): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly bankIds: () => [number, number];
    readonly caseIds: () => [number, number];
    readonly retrieve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly runEpisode: (a: number, b: bigint, c: number, d: number) => [number, number, number, number];
    readonly scorePlan: (a: number, b: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
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
