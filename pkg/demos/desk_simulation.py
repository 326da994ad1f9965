"""Traders sharing two order gateways in virtual time.

Each trader thinks for a seeded random time, takes a gateway, holds it
while its order is sent, and lets go.
"""
from __future__ import annotations

from sigmastream.simulation import Acquire, Environment, Release, YieldFor, activations


def trader(orders: int):
    def behavior(ctx):
        for _ in range(orders):
            yield YieldFor(ctx.rng.randint(1, 20))
            yield Acquire("gateway")
            yield YieldFor(5)
            yield Release("gateway")
    return behavior


def main() -> None:
    env = Environment(seed=3)
    env.add_resource("gateway", 2)
    for name in ("ana", "ben", "chi", "dee"):
        env.add_agent(name, trader(3))
    trace = env.run(200)
    for r in trace:
        if r.signal in ("acquire", "wait", "release"):
            print(f"{r.time:4d}  {r.agent:<4} {r.signal:<8} {r.detail}")
    gw = env.resources["gateway"]
    print(f"{len(activations(trace))} activations, {gw.grants} grants, {gw.releases} releases")


if __name__ == "__main__":
    main()
