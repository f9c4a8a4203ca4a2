"""Smoke test for the domaintopo_py extension module."""

import domaintopo_py as dt

uid = dt.encode_uid(3, 12345, 0b101_011_001)
assert dt.decode_uid(uid) == (3, 12345, 0b101_011_001)

word = dt.encode_query(0, 1, 77, 0)
assert dt.decode_query(word) == (0, 1, 77, 0)

assert dt.build_pattern(2, [0, 1, 3]) == [
    ("recv", 0), ("send", 0), ("recv", 1), ("send", 1),
    ("local", None), ("send", 3), ("recv", 3),
]
assert dt.grid_count(3) == 585

pairs = [(a, b) for a in range(4) for b in range(a + 1, 4)]
regular = dt.stage_table(pairs)
joined = dt.stage_table(pairs, joined=True)
assert len(joined) <= len(regular)

sim = dt.Simulation(depth=2, ranks=4)
assert sim.grid_count() == 73
leaves = sim.leaves()
msgs, _ = sim.round(refine=[(r, g) for r, g, _ in leaves[::5]], balance=True)
assert msgs > 0
assert sim.check() == []
assert dt.check_dumps(sim.dumps()) == []

passed, rounds, _, reason, scenario = dt.fuzz(seed=7, rounds=10, ranks=4)
assert passed, reason
assert rounds == 10
assert dt.replay(scenario) is None

initial, final, _, _, _ = dt.bench(2, 4)
assert (initial, final) == (73, 585)

print("smoke test passed")
