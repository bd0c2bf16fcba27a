"""
Network module for the Rivulet drop simulator.
Layer graphs with branch inputs and merge nodes, the three predictor
architectures, and deterministic model files.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from src.geometry import N_CTRL
from src.layers import LAYER_TYPES, LSTM, Dense, DimMismatch, MissingCache, NeuralError


logger = logging.getLogger(__name__)


MODEL_FORMAT = "nd-model v1"
NET_NAMES = ('contour', 'gradient', 'breakage')


class CorruptFile(NeuralError):
    """Raised when a model file cannot be parsed."""
    pass


class VersionMismatch(NeuralError):
    """Raised when a model file carries an unexpected format tag."""
    pass


@dataclass
class Node:
    """
    One graph vertex.

    Input nodes select columns ``[start, stop)`` of the model input; layer
    nodes apply ``layer`` to a single source; merge nodes concatenate their
    sources along the feature axis.
    """

    name: str
    kind: str
    sources: List[str] = field(default_factory=list)
    layer: Optional[Union[Dense, LSTM]] = None
    start: int = 0
    stop: int = 0

    @property
    def dim(self) -> int:
        if self.kind == 'input':
            return self.stop - self.start
        if self.kind == 'layer':
            return self.layer.out_dim
        raise AttributeError("merge dims depend on sources")


class Model:
    """
    Directed acyclic arrangement of layers with exactly one output node.

    Nodes are kept in insertion order, which must be topological. The
    output is the last node added.
    """

    def __init__(self, net: str = 'custom', dropout_rate: float = 0.0, seed: int = 0,
                 meta: Optional[Dict[str, Any]] = None):
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError(f"Dropout rate must be in [0, 1), got {dropout_rate}")
        self.net = net
        self.dropout_rate = dropout_rate
        self.seed = seed
        self.meta: Dict[str, Any] = dict(meta or {})
        self.nodes: Dict[str, Node] = {}
        self._dims: Dict[str, int] = {}
        self._sequence: Dict[str, bool] = {}
        self.sequence_input = False

    # ------------------------------------------------------------------ building

    def add_input(self, name: str, start: int, stop: int, sequence: bool = True) -> str:
        if stop <= start:
            raise DimMismatch(f"Input '{name}' has an empty column range [{start}, {stop})")
        self._add(Node(name, 'input', start=start, stop=stop), stop - start, sequence)
        self.sequence_input = sequence
        return name

    def add_layer(self, name: str, layer: Union[Dense, LSTM], source: str) -> str:
        if source not in self.nodes:
            raise KeyError(f"Unknown source node '{source}'")
        if self._dims[source] != layer.in_dim:
            raise DimMismatch(f"Layer '{name}' expects width {layer.in_dim}, source '{source}' gives {self._dims[source]}")
        seq_in = self._sequence[source]
        if isinstance(layer, LSTM) and not seq_in:
            raise DimMismatch(f"LSTM '{name}' needs a sequence source")
        if isinstance(layer, Dense) and seq_in:
            raise DimMismatch(f"Dense '{name}' needs a non-sequence source")
        self._add(Node(name, 'layer', [source], layer), layer.out_dim,
                  isinstance(layer, LSTM) and layer.returns_sequence)
        return name

    def add_merge(self, name: str, sources: List[str]) -> str:
        if len(sources) < 2:
            raise DimMismatch(f"Merge '{name}' needs at least two sources")
        kinds = {self._sequence[s] for s in sources}
        if len(kinds) != 1:
            raise DimMismatch(f"Merge '{name}' mixes sequence and non-sequence sources")
        self._add(Node(name, 'merge', list(sources)), sum(self._dims[s] for s in sources), kinds.pop())
        return name

    def _add(self, node: Node, dim: int, sequence: bool):
        if node.name in self.nodes:
            raise ValueError(f"Duplicate node name '{node.name}'")
        self.nodes[node.name] = node
        self._dims[node.name] = dim
        self._sequence[node.name] = sequence

    @property
    def output(self) -> str:
        return next(reversed(self.nodes))

    @property
    def input_dim(self) -> int:
        return max(n.stop for n in self.nodes.values() if n.kind == 'input')

    @property
    def output_dim(self) -> int:
        return self._dims[self.output]

    def validate(self) -> List[str]:
        """Graph checks: one output, every node reachable into it."""
        errors = []
        consumed = {s for n in self.nodes.values() for s in n.sources}
        sinks = [name for name in self.nodes if name not in consumed]
        if sinks != [self.output]:
            errors.append(f"Graph must have exactly one output node, found {sinks}")
        if self._sequence.get(self.output, False):
            errors.append("Output node must not return a sequence")
        return errors

    def initialize(self, seed: Optional[int] = None) -> 'Model':
        rng = np.random.default_rng(self.seed if seed is None else seed)
        for node in self.nodes.values():
            if node.kind == 'layer':
                node.layer.initialize(rng)
        return self

    def layers(self) -> List[Tuple[str, Union[Dense, LSTM]]]:
        return [(n.name, n.layer) for n in self.nodes.values() if n.kind == 'layer']

    def parameters(self) -> Dict[str, np.ndarray]:
        """Live parameter arrays keyed 'node.param', in graph order."""
        return {f"{name}.{key}": arr for name, layer in self.layers() for key, arr in layer.params.items()}

    def describe(self) -> List[Dict[str, Any]]:
        """Per-node summary used for architecture inspection."""
        rows = []
        for node in self.nodes.values():
            row = {'name': node.name, 'kind': node.kind, 'sources': list(node.sources), 'dim': self._dims[node.name]}
            if node.kind == 'layer':
                row.update(layer=node.layer.kind, activation=node.layer.activation,
                           in_dim=node.layer.in_dim, returns_sequence=node.layer.returns_sequence)
            rows.append(row)
        return rows

    # ---------------------------------------------------------------- computing

    def forward(self, x: np.ndarray, train: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, Dict]:
        """
        Evaluate the graph.

        Args:
            x: (batch, steps, features) for sequence models, else (batch, features)
            train: Apply inverted dropout to every non-output layer
            rng: Dropout mask generator (required when train and dropout > 0)

        Returns:
            (output, cache) where cache feeds ``backward``

        Raises:
            DimMismatch: If x does not match the graph inputs
        """
        x = np.asarray(x, dtype=np.float64)
        expected_ndim = 3 if self.sequence_input else 2
        if x.ndim != expected_ndim or x.shape[-1] != self.input_dim:
            raise DimMismatch(f"Model '{self.net}' expects {expected_ndim}D input with {self.input_dim} features, "
                              f"got {x.shape}")
        use_dropout = train and self.dropout_rate > 0.0
        if use_dropout and rng is None:
            rng = np.random.default_rng(self.seed)
        keep = 1.0 - self.dropout_rate

        values: Dict[str, np.ndarray] = {}
        cache: Dict[str, Any] = {'x_shape': x.shape, 'layers': {}, 'masks': {}}
        output = self.output
        for name, node in self.nodes.items():
            if node.kind == 'input':
                values[name] = x[..., node.start:node.stop]
            elif node.kind == 'merge':
                values[name] = np.concatenate([values[s] for s in node.sources], axis=-1)
            else:
                out, layer_cache = node.layer.forward(values[node.sources[0]])
                cache['layers'][name] = layer_cache
                if use_dropout and name != output:
                    mask = (rng.random(out.shape) < keep) / keep
                    cache['masks'][name] = mask
                    out = out * mask
                values[name] = out
        return values[output], cache

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x, train=False)[0]

    def backward(self, dout: np.ndarray, cache: Optional[Dict]) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
        """
        Gradients of a scalar loss given d(loss)/d(output).

        Returns:
            (parameter gradients keyed like ``parameters()``, input gradient)

        Raises:
            MissingCache: If cache is None or lacks a layer entry
        """
        if cache is None:
            raise MissingCache("Model.backward called without a forward cache")
        grads: Dict[str, np.ndarray] = {}
        douts: Dict[str, np.ndarray] = {self.output: np.asarray(dout, dtype=np.float64)}
        dx = np.zeros(cache['x_shape'])

        for name in reversed(list(self.nodes)):
            node = self.nodes[name]
            d = douts.pop(name, None)
            if d is None:
                continue
            if node.kind == 'input':
                dx[..., node.start:node.stop] += d
            elif node.kind == 'merge':
                offset = 0
                for s in node.sources:
                    width = self._dims[s]
                    self._accumulate(douts, s, d[..., offset:offset + width])
                    offset += width
            else:
                if name not in cache['layers']:
                    raise MissingCache(f"No forward cache for layer '{name}'")
                if name in cache['masks']:
                    d = d * cache['masks'][name]
                d_in, layer_grads = node.layer.backward(d, cache['layers'][name])
                for key, g in layer_grads.items():
                    grads[f"{name}.{key}"] = g
                self._accumulate(douts, node.sources[0], d_in)

        for key, arr in self.parameters().items():
            grads.setdefault(key, np.zeros_like(arr))
        return {key: grads[key] for key in self.parameters()}, dx

    @staticmethod
    def _accumulate(douts: Dict[str, np.ndarray], name: str, d: np.ndarray):
        douts[name] = douts[name] + d if name in douts else d

    # ------------------------------------------------------------ serialization

    def to_dict(self) -> Dict[str, Any]:
        nodes = []
        for node in self.nodes.values():
            entry: Dict[str, Any] = {'name': node.name, 'kind': node.kind}
            if node.kind == 'input':
                entry.update(start=node.start, stop=node.stop, sequence=self._sequence[node.name])
            elif node.kind == 'merge':
                entry['sources'] = list(node.sources)
            else:
                layer = node.layer
                entry.update(source=node.sources[0], layer=layer.kind, in_dim=layer.in_dim,
                             out_dim=layer.out_dim, activation=layer.activation,
                             returns_sequence=layer.returns_sequence,
                             weights={k: v.tolist() for k, v in layer.params.items()})
            nodes.append(entry)
        return {'format': MODEL_FORMAT, 'net': self.net, 'dropout_rate': self.dropout_rate,
                'seed': self.seed, 'meta': self.meta, 'nodes': nodes}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Model':
        if data.get('format') != MODEL_FORMAT:
            raise VersionMismatch(f"Expected model format '{MODEL_FORMAT}', got '{data.get('format')}'")
        model = cls(data['net'], data['dropout_rate'], data['seed'], data.get('meta'))
        for entry in data['nodes']:
            if entry['kind'] == 'input':
                model.add_input(entry['name'], entry['start'], entry['stop'], entry['sequence'])
            elif entry['kind'] == 'merge':
                model.add_merge(entry['name'], entry['sources'])
            else:
                params = {k: np.array(v, dtype=np.float64) for k, v in entry['weights'].items()}
                layer_cls = LAYER_TYPES[entry['layer']]
                kwargs = {'returns_sequence': entry['returns_sequence']} if layer_cls is LSTM else {}
                layer = layer_cls(entry['in_dim'], entry['out_dim'], entry['activation'], params=params, **kwargs)
                model.add_layer(entry['name'], layer, entry['source'])
        return model


def save_model(model: Model, path: Union[str, Path]) -> Path:
    """Write a model as JSON with fixed key order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(model.to_dict(), f)
    logger.info(f"Model '{model.net}' saved: {path}")
    return path


def load_model(path: Union[str, Path]) -> Model:
    """
    Read a model file.

    Raises:
        FileNotFoundError: If the file does not exist
        CorruptFile: If the JSON is truncated or structurally invalid
        VersionMismatch: If the format tag is not "nd-model v1"
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Model file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CorruptFile(f"{path}: {e}") from e
    if not isinstance(data, dict):
        raise CorruptFile(f"{path}: top-level value is not an object")
    try:
        model = Model.from_dict(data)
    except VersionMismatch:
        raise
    except (KeyError, TypeError, ValueError, NeuralError) as e:
        raise CorruptFile(f"{path}: {e}") from e
    logger.info(f"Model '{model.net}' loaded from {path}")
    return model


def build_contour_net(hidden: int = 260, dropout_rate: float = 0.2, seed: int = 0) -> Model:
    """
    Contour predictor.

    x and y coordinates each pass through an LSTM, are merged and run
    through four shared LSTMs; the centre passes through three LSTMs. The
    two branches merge into two final LSTMs (the last keeps only its final
    state) and a linear Dense of width 106.
    """
    model = Model('contour', dropout_rate, seed)
    x = model.add_input('x_coords', 0, N_CTRL)
    y = model.add_input('y_coords', N_CTRL, 2 * N_CTRL)
    c = model.add_input('center', 2 * N_CTRL, 2 * N_CTRL + 2)

    x = model.add_layer('x_lstm', LSTM(N_CTRL, hidden), x)
    y = model.add_layer('y_lstm', LSTM(N_CTRL, hidden), y)
    xy = model.add_merge('xy_merge', [x, y])
    width = 2 * hidden
    for k in range(4):
        xy = model.add_layer(f'shape_lstm{k + 1}', LSTM(width, hidden), xy)
        width = hidden

    width = 2
    for k in range(3):
        c = model.add_layer(f'center_lstm{k + 1}', LSTM(width, hidden), c)
        width = hidden

    h = model.add_merge('merge', [xy, c])
    h = model.add_layer('lstm1', LSTM(2 * hidden, hidden), h)
    h = model.add_layer('lstm2', LSTM(hidden, hidden, returns_sequence=False), h)
    model.add_layer('output', Dense(hidden, 2 * N_CTRL + 2), h)
    return model.initialize()


def build_gradient_net(hidden: int = 250, dropout_rate: float = 0.2, seed: int = 0) -> Model:
    """Gradient predictor: six LSTMs of width 250 and a linear Dense of width 52."""
    model = Model('gradient', dropout_rate, seed)
    h = model.add_input('magnitudes', 0, N_CTRL)
    width = N_CTRL
    for k in range(6):
        h = model.add_layer(f'lstm{k + 1}', LSTM(width, hidden, returns_sequence=k < 5), h)
        width = hidden
    model.add_layer('output', Dense(hidden, N_CTRL), h)
    return model.initialize()


def build_breakage_net(hidden: int = 150, dropout_rate: float = 0.2, seed: int = 0) -> Model:
    """Breakage classifier: six ReLU Dense layers and a single sigmoid unit."""
    model = Model('breakage', dropout_rate, seed)
    h = model.add_input('shape', 0, 2 * N_CTRL, sequence=False)
    width = 2 * N_CTRL
    for k in range(6):
        h = model.add_layer(f'dense{k + 1}', Dense(width, hidden, 'relu'), h)
        width = hidden
    model.add_layer('output', Dense(hidden, 1, 'sigmoid'), h)
    return model.initialize()


BUILDERS: Dict[str, Callable[..., Model]] = {
    'contour': build_contour_net,
    'gradient': build_gradient_net,
    'breakage': build_breakage_net,
}


def numerical_gradient(f: Callable[[], float], array: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function with respect to ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=['multi_index'])
    for _ in it:
        idx = it.multi_index
        orig = array[idx]
        array[idx] = orig + eps
        plus = f()
        array[idx] = orig - eps
        minus = f()
        array[idx] = orig
        grad[idx] = (plus - minus) / (2.0 * eps)
    return grad
