/**
 * Dense row-major float64 matrices, sized for desk-scale fixtures.
 *
 * This is deliberately the naive dense path: the reference scorer builds the
 * full projector matrix that the main tool is forbidden from materializing,
 * so the two implementations share no shortcuts.
 */

export interface Mat {
  rows: number;
  cols: number;
  data: Float64Array; // row-major
}

export function mat(rows: number, cols: number, data?: Float64Array): Mat {
  if (data !== undefined && data.length !== rows * cols) {
    throw new Error(`data length ${data.length} != ${rows}x${cols}`);
  }
  return { rows, cols, data: data ?? new Float64Array(rows * cols) };
}

export function matmul(a: Mat, b: Mat): Mat {
  if (a.cols !== b.rows) {
    throw new Error(`cannot multiply ${a.rows}x${a.cols} by ${b.rows}x${b.cols}`);
  }
  const out = mat(a.rows, b.cols);
  for (let i = 0; i < a.rows; i++) {
    for (let k = 0; k < a.cols; k++) {
      const aik = a.data[i * a.cols + k];
      if (aik === 0) continue;
      for (let j = 0; j < b.cols; j++) {
        out.data[i * b.cols + j] += aik * b.data[k * b.cols + j];
      }
    }
  }
  return out;
}

export function transpose(a: Mat): Mat {
  const out = mat(a.cols, a.rows);
  for (let i = 0; i < a.rows; i++) {
    for (let j = 0; j < a.cols; j++) {
      out.data[j * a.rows + i] = a.data[i * a.cols + j];
    }
  }
  return out;
}

export function sub(a: Mat, b: Mat): Mat {
  if (a.rows !== b.rows || a.cols !== b.cols) {
    throw new Error(`shape mismatch: ${a.rows}x${a.cols} vs ${b.rows}x${b.cols}`);
  }
  const out = mat(a.rows, a.cols);
  for (let i = 0; i < a.data.length; i++) out.data[i] = a.data[i] - b.data[i];
  return out;
}

export function scaled(a: Mat, s: number): Mat {
  const out = mat(a.rows, a.cols);
  for (let i = 0; i < a.data.length; i++) out.data[i] = a.data[i] * s;
  return out;
}

export function frobInner(a: Mat, b: Mat): number {
  if (a.rows !== b.rows || a.cols !== b.cols) {
    throw new Error(`shape mismatch: ${a.rows}x${a.cols} vs ${b.rows}x${b.cols}`);
  }
  let acc = 0;
  for (let i = 0; i < a.data.length; i++) acc += a.data[i] * b.data[i];
  return acc;
}

export function frobNorm(a: Mat): number {
  return Math.sqrt(frobInner(a, a));
}

/** Keep every `step`-th column, starting at column 0. */
export function subsampleColumns(a: Mat, step: number): Mat {
  if (step < 1 || !Number.isInteger(step)) {
    throw new Error(`subsample step must be a positive integer, got ${step}`);
  }
  const keptCols = Math.ceil(a.cols / step);
  const out = mat(a.rows, keptCols);
  for (let i = 0; i < a.rows; i++) {
    for (let j = 0; j < keptCols; j++) {
      out.data[i * keptCols + j] = a.data[i * a.cols + j * step];
    }
  }
  return out;
}
