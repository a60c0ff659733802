// Alert badge: one summary state over all rules, plus a transition log so
// tests (and the badge animation) can watch none -> firing -> resolved.

import type { AlertRuleDoc, RuleState } from "./model.js";

export function overallState(rules: AlertRuleDoc[]): RuleState {
  let sawResolved = false;
  for (const rule of rules) {
    const state = rule.runtime?.state ?? "none";
    if (state === "firing") return "firing";
    if (state === "resolved") sawResolved = true;
  }
  return sawResolved ? "resolved" : "none";
}

export class BadgeTracker {
  state: RuleState = "none";
  transitions: RuleState[] = ["none"];

  update(rules: AlertRuleDoc[]): RuleState {
    const next = overallState(rules);
    if (next !== this.state) {
      this.state = next;
      this.transitions.push(next);
    }
    return this.state;
  }

  /** True once the badge has walked none -> firing -> resolved in order
   *  (other states may intervene; the order is what matters). */
  sawFullCycle(): boolean {
    const iFiring = this.transitions.indexOf("firing");
    return iFiring > 0 && this.transitions.slice(iFiring).includes("resolved");
  }
}
