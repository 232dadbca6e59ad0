"""The lock-based and hierarchy-aware variants, and what the runtime traces.

Run with ``python demos/02_lock_and_hierarchy.py``.
"""
from __future__ import annotations

from persistent_rma import alltoallv_fence_hierarchy_init, alltoallv_lock_init, spawn_world, uniform_pattern

pattern = uniform_pattern(8, 16)
small = uniform_pattern(4, 16)

# Hierarchy variant: 8 ranks, 2 per node.  Off-node targets are written first.


def hier(ctx):
    req = alltoallv_fence_hierarchy_init(ctx, pattern.slice(ctx.rank))
    req.start()
    req.wait()
    order = [rec.target for rec in sorted(ctx.put_log, key=lambda rec: rec.issue_index)]
    req.free()
    return ctx.node_id, order


for rank, (node, order) in enumerate(spawn_world(8, 2, hier, validate=True)):
    print(f"rank {rank} (node {node}) put order: {order}")

# Lock variant: the window stays exclusively self-locked between iterations,
# so peers' lock_all only opens once the owner has reached start.


def lock(ctx):
    spec = small.slice(ctx.rank)
    spec.sendbuf[:] = ctx.rank
    req = alltoallv_lock_init(ctx, spec)
    states = [req.window.epoch_state.value]
    req.start()
    states.append(req.window.epoch_state.value)
    req.wait()
    states.append(req.window.epoch_state.value)
    received = sorted(set(req.recv().tolist()))
    req.free()
    return states, received


states, received = spawn_world(4, 1, lock, validate=True)[0]
print("rank 0 epoch states (init, start, wait):", states)
print("rank 0 received values from ranks:", received)
