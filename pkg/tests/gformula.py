"""Brute-force g-formula for discrete scenarios, written from the JSON alone.

Nothing here imports the package's simulator: the structural equations are
re-typed from the scenario file so that agreement with the engine is a
genuine two-route check.
"""

import json
import math
from importlib import resources

NDE_ZEROED = {("outcome", "monitored"), ("outcome", "prev_monitored"), ("latent_a1c", "monitored")}


def expit(x):
    return 1.0 / (1.0 + math.exp(-x))


def bundled(name):
    return json.loads((resources.files("dtrmon.scenarios") / f"{name}.json").read_text())


class Scenario:
    def __init__(self, raw):
        self.raw = raw
        self.horizon = raw["horizon"]
        self.ref = raw["reference_a1c"]
        self.nde = raw.get("nde", False)
        self.p_u1 = raw["u1"]["p"]
        lat = raw["latent_a1c"]
        self.levels = lat["levels"]
        self.cuts = lat["cutpoints"]
        self.base_cuts = lat["baseline_cutpoints"]
        self.u_arrows = raw["monitoring"].get("u_arrows", True)

    def c(self, eq, key):
        if self.nde and (eq, key) in NDE_ZEROED:
            return 0.0
        return float(self.raw.get(eq, {}).get(key, 0.0))

    def level_probs(self, cuts, eta):
        # P(index >= k) = expit(cuts[k-1] + eta)
        exceed = [1.0] + [expit(c + eta) for c in cuts] + [0.0]
        return [exceed[k] - exceed[k + 1] for k in range(len(self.levels))]

    def p_u2(self, u1, i0, a1):
        eta = self.c("u2", "intercept") + self.c("u2", "u1") * u1 + self.c("u2", "a1c") * (i0 - self.ref) \
            + self.c("u2", "a1") * a1
        return expit(eta)

    def p_monitor(self, t, a1, i_obs, prev_n, u1, u2):
        eta = (self.c("monitoring", "intercept") + self.c("monitoring", "time") * t
               + self.c("monitoring", "a1") * a1 + self.c("monitoring", "a1c") * (i_obs - self.ref)
               + self.c("monitoring", "prev_monitored") * prev_n)
        if self.u_arrows:
            eta += self.c("monitoring", "u1") * u1 + self.c("monitoring", "u2") * u2
        return expit(eta)

    def p_fail(self, t, i0, a1, u1, u2, n, prev_n):
        eta = (self.c("outcome", "intercept") + self.c("outcome", "time") * t
               + self.c("outcome", "a1c") * (i0 - self.ref) + self.c("outcome", "a1") * a1
               + self.c("outcome", "u1") * u1 + self.c("outcome", "u2") * u2
               + self.c("outcome", "monitored") * n)
        if t > 0:
            eta += self.c("outcome", "prev_monitored") * prev_n
        return expit(eta)

    def next_level_probs(self, i0, u1, u2, a1, n):
        eta = (self.c("latent_a1c", "persistence") * (i0 - self.ref) + self.c("latent_a1c", "u1") * u1
               + self.c("latent_a1c", "u2") * u2 + self.c("latent_a1c", "treated") * a1
               + self.c("latent_a1c", "monitored") * n)
        return self.level_probs(self.cuts, eta)


def scheduled(skip, t):
    # n_j(-1) = 1 from the formula itself: the baseline A1c is always measured
    return int((t + 1) % (skip + 1) == 0)


def counterfactual_risk(raw, threshold, kind="none", skip=0):
    """Cumulative risk P(Y(h) = 1) for h = 1..horizon under the regime."""
    sc = Scenario(raw)
    K = sc.horizon - 1
    fail_by = [0.0] * (sc.horizon + 1)

    def period(t, mass, u1, i0, i_obs, prev_a1, prev_n):
        if mass == 0.0:
            return
        seen_n, seen_i = prev_n, i_obs
        if kind == "relaxed" and not scheduled(skip, t - 1):
            seen_n, seen_i = 0, 0.0
        a1 = 1 if prev_a1 == 1 or (seen_n == 1 and seen_i >= threshold) else 0
        for u2 in (0, 1):
            pu2 = sc.p_u2(u1, i0, a1)
            m_u2 = mass * (pu2 if u2 else 1.0 - pu2)
            if kind == "static":
                pn = float(scheduled(skip, t))
            elif kind == "relaxed" and scheduled(skip, t):
                pn = 1.0
            else:
                pn = sc.p_monitor(t, a1, i_obs, prev_n, u1, u2)
            for n in (0, 1):
                m_n = m_u2 * (pn if n else 1.0 - pn)
                if m_n == 0.0:
                    continue
                pf = sc.p_fail(t, i0, a1, u1, u2, n, prev_n)
                fail_by[t + 1] += m_n * pf
                if t == K:
                    continue
                for k, pk in enumerate(sc.next_level_probs(i0, u1, u2, a1, n)):
                    nxt = sc.levels[k]
                    period(t + 1, m_n * (1.0 - pf) * pk, u1, nxt, nxt if n else i_obs, a1, n)

    for u1 in (0, 1):
        m_u1 = sc.p_u1 if u1 else 1.0 - sc.p_u1
        base = sc.level_probs(sc.base_cuts, raw["latent_a1c"].get("baseline_u1", 0.0) * u1)
        for k, pk in enumerate(base):
            lev = sc.levels[k]
            period(0, m_u1 * pk, u1, lev, lev, 0, 1)
    out, acc = [], 0.0
    for h in range(1, sc.horizon + 1):
        acc += fail_by[h]
        out.append(acc)
    return out
