/* tslint:disable */
/* eslint-disable */

/**
 * Distance from a point at the given angles to a cone.
 */
export function distance(entity: Float64Array, axis: Float64Array, aperture: Float64Array, lambda: number): number;

/**
 * Intersection with all-zero network weights: the axis is the plain
 * circular mean and the aperture half the smaller input.
 */
export function intersect(axis_a: Float64Array, aperture_a: Float64Array, axis_b: Float64Array, aperture_b: Float64Array): Float64Array;

export function negate(axis: Float64Array, aperture: Float64Array): Float64Array;

/**
 * Rotates a cone by a relation. `variant` is `rocone`, `trunc` or `se`.
 */
export function project(axis: Float64Array, aperture: Float64Array, rel_axis: Float64Array, rel_aperture: Float64Array, variant: string): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly distance: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number];
    readonly intersect: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
    readonly negate: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly project: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number, j: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
