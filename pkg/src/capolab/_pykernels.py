"""Pure-numpy reference versions of the compiled kernels in ``_ext.pyx``."""
import numpy as np


def forward(weights, biases, x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    acts = [x]
    last = len(weights) - 1
    for layer, (W, b) in enumerate(zip(weights, biases)):
        y = acts[-1] @ W.T + b
        if layer < last:
            np.tanh(y, out=y)
        acts.append(y)
    return acts


def backward(weights, acts, grad_out, grad_weights, grad_biases, want_input=False):
    delta = np.array(grad_out, dtype=np.float64, copy=True)
    grad_in = None
    for layer in range(len(weights) - 1, -1, -1):
        A = acts[layer]
        grad_weights[layer][...] = delta.T @ A
        grad_biases[layer][...] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ weights[layer]) * (1.0 - A * A)
        elif want_input:
            grad_in = delta @ weights[layer]
    return grad_in


def gae(rewards, values, next_values, terminated, dones, gamma, lam):
    rewards = np.asarray(rewards, dtype=np.float64)
    T, E = rewards.shape
    boot = np.where(np.asarray(terminated, dtype=bool), 0.0, next_values)
    deltas = rewards + gamma * boot - values
    keep = 1.0 - np.asarray(dones, dtype=np.float64)
    adv = np.empty((T, E))
    acc = np.zeros(E)
    for t in range(T - 1, -1, -1):
        acc = deltas[t] + gamma * lam * keep[t] * acc
        adv[t] = acc
    return adv
