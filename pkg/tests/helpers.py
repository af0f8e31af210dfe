"""Shared oracles for the test-suite."""
import numpy as np

from opa3d.geometry import OrientedBox


def central_difference(f, arrays, h=1e-5, coords=None):
    """Central-difference gradient of scalar ``f()`` w.r.t. arrays mutated in place.

    ``coords`` optionally restricts to ``[(array_index, flat_index), ...]``;
    the result is then a flat array in the same order.
    """
    if coords is None:
        grads = []
        for a in arrays:
            g = np.zeros_like(a)
            flat, gflat = a.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                up = f()
                flat[i] = old - h
                down = f()
                flat[i] = old
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
        return grads
    out = np.zeros(len(coords))
    for k, (ai, i) in enumerate(coords):
        flat = arrays[ai].reshape(-1)
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out[k] = (up - down) / (2 * h)
    return out


def max_relative_error(analytic, numeric, floor=1e-6):
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    a = np.concatenate([np.ravel(x) for x in analytic]) if isinstance(analytic, list) else np.ravel(analytic)
    n = np.concatenate([np.ravel(x) for x in numeric]) if isinstance(numeric, list) else np.ravel(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def brute_force_fps(points, count, start=0):
    """Greedy max-min selection recomputing all pairwise distances each round."""
    n = len(points)
    chosen = [start]
    while len(chosen) < count:
        best, best_d = None, -1.0
        for i in range(n):
            if i in chosen:
                continue
            d = min(float(np.linalg.norm(points[i] - points[j])) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def monte_carlo_iou(a: OrientedBox, b: OrientedBox, n, rng):
    """IoU estimate from uniform samples over the union's bounding region."""
    corners = np.concatenate([a.corners_xy(), b.corners_xy()])
    lo = np.array([*corners.min(axis=0), min(a.center[2] - a.half[2], b.center[2] - b.half[2])])
    hi = np.array([*corners.max(axis=0), max(a.center[2] + a.half[2], b.center[2] + b.half[2])])
    pts = rng.uniform(lo, hi, size=(n, 3))
    in_a = np.all(np.abs(a.to_local(pts)) <= a.half, axis=1)
    in_b = np.all(np.abs(b.to_local(pts)) <= b.half, axis=1)
    union = np.count_nonzero(in_a | in_b)
    return np.count_nonzero(in_a & in_b) / union if union else 0.0


def naive_ap(preds, gts, threshold, iou_fn):
    """Reference AP: explicit PR list, envelope by max over later precisions.

    ``preds`` are (scene, score, box, idx) tuples for one class and ``gts``
    maps scene -> list of boxes of that class.
    """
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return None
    order = sorted(preds, key=lambda p: (-p[1], p[0], p[3]))
    taken = {s: [False] * len(v) for s, v in gts.items()}
    hits = []
    for scene, _, box, _ in order:
        best, best_iou = None, None
        for j, g in enumerate(gts.get(scene, [])):
            if taken[scene][j]:
                continue
            iou = iou_fn(box, g)
            if iou >= threshold and (best_iou is None or iou > best_iou):
                best, best_iou = j, iou
        if best is not None:
            taken[scene][best] = True
        hits.append(best is not None)
    precisions, recalls, tp = [], [], 0
    for k, hit in enumerate(hits, start=1):
        tp += hit
        precisions.append(tp / k)
        recalls.append(tp / n_gt)
    ap, prev_r = 0.0, 0.0
    for k in range(len(hits)):
        if recalls[k] > prev_r:
            ap += (recalls[k] - prev_r) * max(precisions[k:])
            prev_r = recalls[k]
    return ap


def random_graph(rng):
    """A random small differentiable program over three leaf arrays.

    Returns ``(leaves, f, ops)`` where ``f(tensors)`` builds the scalar loss
    and ``ops`` names the operations used. With continuous random inputs
    the kinks of relu/abs/clip/max are hit with probability zero.
    """
    from opa3d import tensor_engine as ag

    n, d, k = int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(2, 5))
    leaves = [rng.normal(size=(n, d)), rng.normal(size=(d, k)) * 0.7, rng.normal(size=k) * 0.3]
    unary = ["relu", "sigmoid", "tanh", "exp", "log", "huber", "abs", "clip", "softmax"]
    chain = list(rng.choice(unary, size=int(rng.integers(1, 4))))
    head = str(rng.choice(["sum", "mean", "max_pool", "cross_entropy", "concat_gather"]))
    targets = rng.integers(0, k, size=n)
    idx = rng.integers(0, n, size=n + 1)

    def f(ts):
        x, w, b = ts
        h = ag.add(ag.matmul(x, w), b)
        for op in chain:
            if op == "relu":
                h = ag.relu(h)
            elif op == "sigmoid":
                h = ag.sigmoid(h)
            elif op == "tanh":
                h = ag.tanh(h)
            elif op == "exp":
                h = ag.exp(ag.tanh(h))
            elif op == "log":
                h = ag.log(ag.sigmoid(h))
            elif op == "huber":
                h = ag.huber(h, 0.5)
            elif op == "abs":
                h = ag.absolute(h)
            elif op == "clip":
                h = ag.clip(h, -0.8, 0.8)
            elif op == "softmax":
                h = ag.softmax(h, axis=-1)
        h = ag.mul(h, ag.sigmoid(ag.div(h, 2.0 + h * h)))
        if head == "sum":
            return ag.tsum(h)
        if head == "mean":
            return ag.mean(ag.sub(h, 0.1))
        if head == "max_pool":
            return ag.tsum(ag.max_pool(h, axis=0))
        if head == "cross_entropy":
            return ag.mean(ag.cross_entropy(h, targets))
        return ag.tsum(ag.gather(ag.concat([h, ag.mul(h, h)], axis=1), idx))

    return leaves, f, chain + [head]


def graph_gradcheck(leaves, f, h=1e-5):
    """Analytic vs central-difference gradients for a ``random_graph`` program."""
    from opa3d import tensor_engine as ag

    ts = [ag.Tensor(a.copy(), requires_grad=True) for a in leaves]
    ag.backward(f(ts))
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.values) for t in ts]
    arrays = [a.copy() for a in leaves]
    with ag.no_grad():
        numeric = central_difference(lambda: float(f([ag.Tensor(a) for a in arrays]).values), arrays, h)
    return analytic, numeric



class SwitchRecorder:
    """Fingerprint of every discrete branch taken during a forward pass.

    Wraps the piecewise ops (relu, max_pool, clip, abs, huber, where) and
    the detector's neighbour/FPS searches. Two evaluations with equal
    fingerprints lie on the same smooth piece of the loss, so a central
    difference between them is valid.
    """

    def __init__(self):
        import hashlib

        from opa3d import detector as det_mod
        from opa3d import tensor_engine as ag

        self._hashlib = hashlib
        self.digest = None
        self._patches = []
        rec = self

        def wrap(module, name, key):
            fn = getattr(module, name)

            def patched(*args, **kwargs):
                out = fn(*args, **kwargs)
                if rec.digest is not None:
                    rec.digest.update(key(Args(args, kwargs), out))
                return out

            self._patches.append((module, name, fn, patched))

        class Args:
            def __init__(self, args, kwargs):
                self.args, self.kwargs = args, kwargs

            def __getitem__(self, spec):
                pos, name, default = spec if isinstance(spec, tuple) else (spec, None, None)
                if pos < len(self.args):
                    return self.args[pos]
                return self.kwargs.get(name, default)

        vals = lambda a: a.values if hasattr(a, "values") else np.asarray(a)
        wrap(ag, "relu", lambda a, o: (vals(a[0]) > 0).tobytes())
        wrap(ag, "absolute", lambda a, o: (vals(a[0]) > 0).tobytes())
        wrap(ag, "clip", lambda a, o: ((vals(a[0]) < a[1, "lo", None]) | (vals(a[0]) > a[2, "hi", None])).tobytes())
        wrap(ag, "huber", lambda a, o: (np.abs(vals(a[0])) <= a[1, "delta", 1.0]).tobytes())
        wrap(ag, "where", lambda a, o: np.asarray(a[0]).tobytes())
        wrap(ag, "max_pool", lambda a, o: np.argmax(vals(a[0]), axis=a[1, "axis", None]).tobytes())
        wrap(det_mod, "knn_indices", lambda a, o: np.asarray(o).tobytes())
        wrap(det_mod, "farthest_point_sampling", lambda a, o: np.asarray(o).tobytes())

    def __enter__(self):
        for module, name, _, patched in self._patches:
            setattr(module, name, patched)
        return self

    def __exit__(self, *exc):
        for module, name, fn, _ in self._patches:
            setattr(module, name, fn)

    def fingerprint(self, fn):
        self.digest = self._hashlib.sha1()
        value = float(fn().values)
        out, self.digest = self.digest.hexdigest(), None
        return value, out


def pipeline_gradcheck(seed, n_coords=40, sample_count=64, h=1e-5, max_draws=400, floor=1e-5):
    """Full-loss gradient check on a 1-scene batch.

    Checks L_D w.r.t. detector parameters (augmented view held fixed) and
    L_A w.r.t. augmentor parameters (detector frozen, rho and L_g
    constant). Matching targets are built once and reused so the
    finite-difference probes see the same discrete assignment, and a
    probe whose +h or -h evaluation takes a different branch of any
    piecewise op than the base point (a kink inside the stencil) is
    redrawn. Crops use boxes inflated by 25% so the clamp stays inactive
    for most probes; object surface points otherwise sit on the faces.

    Relative errors use ``max(|a|, |n|, floor)`` as denominator: float64
    round-off in a central difference of an O(1) loss is about 1e-10, so
    smaller gradient entries are compared in absolute terms. Returns
    ``{"detector": (error, skipped), "augmentor": (error, skipped)}`` over
    ``n_coords`` random parameter entries each.
    """
    from opa3d import tensor_engine as ag
    from opa3d.augmentor import PointAugmentor, apply_crops, plan_crops
    from opa3d.datakit import generate_scene
    from opa3d.detector import VoteDetector
    from opa3d.losses import augmentor_loss, build_targets, detection_loss, rho, rho_inputs

    rng = np.random.default_rng(seed)
    scene = generate_scene(rng, scene_id="g")
    gts = [scene.boxes]
    det = VoteDetector(seed=seed)
    aug = PointAugmentor(seed=seed)
    for name, p in aug.named_parameters().items():
        if name.startswith("aug.3"):
            p.values = rng.normal(0.0, 0.3, p.shape)
    roomy = [b.copy(size=b.size * 1.25) for b in scene.boxes[:3]]
    crops = plan_crops(scene.points, roomy, sample_count, rng)
    xg = scene.points[None]
    with ag.no_grad():
        xa = apply_crops(scene.points, crops, aug)[0].values[None]
        tg = build_targets(det(xg), gts)
        ta = build_targets(det(xa), gts)
        out_g = det(xg)
        lg = detection_loss(out_g, gts, tg).total
        r = rho(rho_inputs(out_g, gts))

    def loss_d():
        return detection_loss(det(xg), gts, tg).total + detection_loss(det(xa), gts, ta).total

    def loss_a():
        pts = apply_crops(scene.points, crops, aug)[0]
        la = detection_loss(det(ag.reshape(pts, (1, -1, 3))), gts, ta).total
        return augmentor_loss(la, lg, r, 0.1)

    result = {}
    for label, module, fn, other in (("detector", det, loss_d, aug), ("augmentor", aug, loss_a, det)):
        params = list(module.named_parameters().values())
        sizes = np.array([p.values.size for p in params])
        module.zero_grad()
        with other.frozen():
            ag.backward(fn())
        analytic, numeric, skipped = [], [], 0
        with ag.no_grad(), SwitchRecorder() as rec:
            _, base = rec.fingerprint(fn)
            for _ in range(max_draws):
                if len(analytic) == n_coords:
                    break
                i = int(rng.choice(len(params), p=sizes / sizes.sum()))
                j = int(rng.integers(0, sizes[i]))
                flat = params[i].values.reshape(-1)
                old = flat[j]
                flat[j] = old + h
                up, fp_up = rec.fingerprint(fn)
                flat[j] = old - h
                down, fp_down = rec.fingerprint(fn)
                flat[j] = old
                if fp_up != base or fp_down != base:
                    skipped += 1
                    continue
                analytic.append(params[i].grad.reshape(-1)[j])
                numeric.append((up - down) / (2 * h))
        module.zero_grad()
        if len(analytic) < n_coords:
            raise RuntimeError(f"{label}: only {len(analytic)} kink-free probes in {max_draws} draws")
        result[label] = (max_relative_error(np.array(analytic), np.array(numeric), floor), skipped)
    return result
