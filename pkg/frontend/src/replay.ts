/**
 * Client-side resident-set state: applies cut-delta messages so the local
 * splat set mirrors the server's view cut.
 */

import type { Message, SoaAttributes, StatsMessage } from "./protocol.js";

export interface ResidentCounts {
  upper: number;
  spts: Record<number, number>;
}

export class ResidentSet {
  readonly spts = new Map<number, SoaAttributes>();
  upper: SoaAttributes | null = null;
  lastStats: StatsMessage | null = null;
  unknownEvictions = 0;

  apply(msg: Message): void {
    switch (msg.type) {
      case "spt_load":
        this.spts.set(msg.sptId, msg.attrs);
        break;
      case "spt_evict":
        if (!this.spts.delete(msg.sptId)) {
          this.unknownEvictions += 1;
        }
        break;
      case "upper_set":
        this.upper = msg.attrs;
        break;
      case "stats":
        this.lastStats = msg;
        break;
      case "camera_pose":
        // server -> client streams never carry poses; ignore defensively
        break;
    }
  }

  residentCounts(): ResidentCounts {
    const spts: Record<number, number> = {};
    for (const [id, attrs] of this.spts) {
      spts[id] = attrs.count;
    }
    return { upper: this.upper === null ? 0 : this.upper.count, spts };
  }

  totalResident(): number {
    let total = this.upper === null ? 0 : this.upper.count;
    for (const attrs of this.spts.values()) {
      total += attrs.count;
    }
    return total;
  }

  /** All resident attribute blocks, upper set first. */
  blocks(): SoaAttributes[] {
    const out: SoaAttributes[] = [];
    if (this.upper !== null) {
      out.push(this.upper);
    }
    for (const id of [...this.spts.keys()].sort((a, b) => a - b)) {
      out.push(this.spts.get(id)!);
    }
    return out;
  }
}
