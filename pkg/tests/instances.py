"""Random finite tasks and backdoor specs for property tests."""

import numpy as np

from bdlab.task import BackdoorSpec, FiniteTask, TriggerMap, region_masses


def t4_task():
    coords = np.array([[0.1, 0.1], [0.3, 0.1], [0.6, 0.5], [0.7, 0.5]])
    cond = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    return FiniteTask(coords, np.full(4, 0.25), cond)


def t4_spec(row=(1.0, 0.0), beta=1.0):
    return BackdoorSpec(TriggerMap({2: 3}), target=0, beta=beta,
                        target_conditional={3: np.array(row)})


def random_task(rng, max_inputs=32, max_labels=5, dim=2):
    n = int(rng.integers(4, max_inputs + 1))
    n_labels = int(rng.integers(2, max_labels + 1))
    coords = rng.random((n, dim))
    prior = rng.dirichlet(np.full(n, 0.7))
    cond = rng.dirichlet(np.full(n_labels, 0.5), size=n)
    return FiniteTask(coords, prior, cond)


def random_spec(rng, task, conforming=False, max_tries=200):
    """Random valid spec with ``Z >= 1``.

    With ``conforming`` the spec also has ``kappa >= 1`` and
    ``1/kappa <= beta <= 1``.  Returns None when no spec is found.
    """
    labels = task.argmax_labels()
    for _ in range(max_tries):
        t = int(rng.integers(task.n_labels))
        eligible = np.nonzero(labels != t)[0]
        if eligible.size < 2:
            continue
        k = int(rng.integers(1, eligible.size + 1))
        region = rng.choice(eligible, size=k, replace=False)
        n_img = int(rng.integers(1, k + 1))
        images = rng.choice(eligible, size=n_img, replace=False)
        mapping = {int(x): int(rng.choice(images)) for x in region}
        trig = TriggerMap(mapping)
        tc = {x: rng.dirichlet(np.full(task.n_labels, 0.5)) for x in trig.image}
        probe = BackdoorSpec(trig, t, 1.0, tc)
        pr_b, pr_ab, _ = region_masses(task, probe)
        if pr_ab <= 0 or pr_b <= 0:
            continue
        kappa = pr_b / pr_ab
        if conforming:
            if kappa < 1:
                continue
            beta = float(rng.uniform(1 / kappa, 1.0))
        else:
            beta = float((pr_ab / pr_b) * rng.uniform(1.0, 3.0))
        return BackdoorSpec(trig, t, beta, tc)
    return None


def random_instances(seed, count, conforming=False, **kw):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        task = random_task(rng, **kw)
        spec = random_spec(rng, task, conforming=conforming)
        if spec is not None:
            out.append((task, spec))
    return out


def matched_instance(rng, k=None, n_labels=None, extra=4):
    """Finite task with an injective trigger whose images carry ``c * prior(preimage)``.

    The within-region measures of ``B`` (pushed through the trigger) and of
    ``A(B)`` then coincide, so i.i.d. trigger samples are unbiased for alpha.
    """
    k = int(k or rng.integers(2, 9))
    n_labels = int(n_labels or rng.integers(2, 5))
    n = 2 * k + extra
    t = 0
    cond = rng.dirichlet(np.full(n_labels, 0.5), size=n)
    for i in range(2 * k):
        # move the largest entry off the target label
        j = int(np.argmax(cond[i]))
        if j == t:
            other = 1 + int(rng.integers(n_labels - 1))
            cond[i, [t, other]] = cond[i, [other, t]]
    base = rng.dirichlet(np.ones(k))
    c = float(rng.uniform(0.3, 1.0))
    rest = rng.dirichlet(np.ones(extra))
    prior = np.concatenate([0.5 * base, 0.5 * c * base, 0.5 * (1 - c) * rest])
    coords = rng.random((n, 2))
    task = FiniteTask(coords, prior / prior.sum(), cond)
    trig = TriggerMap({i: k + i for i in range(k)})
    tc = {k + i: rng.dirichlet(np.full(n_labels, 0.5)) for i in range(k)}
    pr_b, pr_ab, _ = region_masses(task, BackdoorSpec(trig, t, 1.0, tc))
    beta = float(rng.uniform(pr_ab / pr_b, 1.0))
    return task, BackdoorSpec(trig, t, beta, tc)
