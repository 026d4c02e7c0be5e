export interface RetryConfig {
  maxRetries: number;
  delayMs: number;
  exponentialBackoff?: boolean;
}

function retriable(error: unknown): boolean {
  const status = (error as any)?.status;
  if (typeof status === 'number') return status >= 500;
  return true; // network-level failures have no status
}

export async function withRetry<T>(
  operation: () => Promise<T>,
  config: RetryConfig,
  operationName: string,
): Promise<T> {
  let attempt = 0;
  let delay = config.delayMs;
  for (;;) {
    try {
      return await operation();
    } catch (error) {
      attempt++;
      if (!retriable(error) || attempt >= config.maxRetries) {
        throw error;
      }
      await new Promise((resolve) => setTimeout(resolve, delay));
      if (config.exponentialBackoff) delay *= 2;
      console.error(`[retry] ${operationName} failed (${attempt}/${config.maxRetries}), retrying`);
    }
  }
}
