import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    globals: true,
    environment: "node",
    include: ["tests/**/*.test.ts"],
    testTimeout: 20000,
    hookTimeout: 40000,
    // The e2e test drives a live Python service; keep runs serial.
    fileParallelism: false,
  },
});
