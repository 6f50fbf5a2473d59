"""The decision layer in isolation: epsilon schedule, action choice, rewards, TD targets, replay."""
import numpy as np

from marl_diag.numerics import Tensor
from marl_diag.rl import (EpsilonSchedule, ReplayBuffer, Transition, compute_reward, epsilon_at,
                          q_values, select_actions, td_loss, td_target)

sched = EpsilonSchedule(eps_min=0.2, total_steps=100)
print("epsilon at 0, 50, 100, 200:", [round(epsilon_at(s, sched), 3) for s in (0, 50, 100, 200)])

rng = np.random.default_rng(0)
probs = np.array([0.9, 0.7, 0.2, 0.6, 0.1])
labels = np.array([1, 0, 0, 1, 0])
greedy = select_actions(probs, 0.0, 0.5, rng)
explore = select_actions(probs, 1.0, 0.5, rng)
print("greedy", greedy.a, "reward", compute_reward(greedy.a, labels))
print("explore (top class dropped)", explore.a, "reward", compute_reward(explore.a, labels))

# values are +z for "present", -z for "absent"; the target bootstraps from |z'|
z = Tensor(np.log(probs / (1 - probs)), requires_grad=True)
q = q_values(z, greedy.a)
y = td_target(compute_reward(greedy.a, labels), z.data, gamma=0.9)
loss = td_loss(q, y)
loss.backward()
print("Q", q.data.round(3), "target", y.round(3), "loss", round(float(loss.data), 4))
print("gradient reaches the logits only:", z.grad.round(3))

buf = ReplayBuffer(capacity=3, seed=0)
for i in range(5):
    buf.push(Transition({}, greedy.a, np.ones(5), {}, episode=i))
print("buffer keeps the newest", [t.episode for t in buf.items()], "after", buf.pushes, "pushes")
print("sample of 4 from 3:", buf.sample(4))
