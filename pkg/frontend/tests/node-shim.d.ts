/** Minimal ambient declarations for the node built-ins the tests use, so the
 * build needs no installed type packages. */

declare module "node:test" {
  type TestFn = () => void | Promise<void>;
  export function test(name: string, fn: TestFn): void;
}

declare module "node:assert/strict" {
  interface Assert {
    (value: unknown, message?: string): void;
    equal(actual: unknown, expected: unknown, message?: string): void;
    notEqual(actual: unknown, expected: unknown, message?: string): void;
    deepEqual(actual: unknown, expected: unknown, message?: string): void;
    ok(value: unknown, message?: string): void;
    throws(fn: () => unknown, message?: string): void;
    rejects(block: Promise<unknown> | (() => Promise<unknown>),
            message?: string): Promise<void>;
  }
  const assert: Assert;
  export default assert;
}
