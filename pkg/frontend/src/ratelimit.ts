/**
 * Latest-wins pose rate limiter: camera updates arrive at display rate
 * (e.g. 120 Hz) but at most `maxPerSecond` pose messages go to the server,
 * and a stale intermediate pose is never sent once a newer one exists.
 */

export class PoseRateLimiter<T> {
  private readonly minIntervalMs: number;
  private lastSentAt = -Infinity;
  private pending: T | undefined;
  sent = 0;

  constructor(
    private readonly send: (pose: T) => void,
    maxPerSecond = 30,
  ) {
    if (maxPerSecond <= 0) {
      throw new RangeError("maxPerSecond must be > 0");
    }
    this.minIntervalMs = 1000 / maxPerSecond;
  }

  /** Offer a new pose at time `nowMs`; sends it immediately if the rate
   * budget allows, otherwise keeps it as the (single) pending pose. */
  submit(pose: T, nowMs: number): void {
    if (nowMs - this.lastSentAt >= this.minIntervalMs) {
      this.dispatch(pose, nowMs);
    } else {
      this.pending = pose;
    }
  }

  /** Drive pending sends; call from the animation loop. */
  tick(nowMs: number): void {
    if (
      this.pending !== undefined &&
      nowMs - this.lastSentAt >= this.minIntervalMs
    ) {
      const pose = this.pending;
      this.pending = undefined;
      this.dispatch(pose, nowMs);
    }
  }

  private dispatch(pose: T, nowMs: number): void {
    this.lastSentAt = nowMs;
    this.sent += 1;
    this.send(pose);
  }
}
