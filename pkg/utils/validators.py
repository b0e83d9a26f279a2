from typing import Any, Dict, Tuple

EXPERIMENTS = ("lung-segmentation", "lesion-segmentation-a", "lesion-segmentation-b")
ARCHITECTURES = ("unet", "linknet", "fpn", "pspnet")
ENCODER_FAMILIES = ("vgg-like", "resnet-like", "densenet-like", "mobilenet-like")
INIT_KINDS = ("random", "warmstart")
EMPTY_RULES = ("lenient", "strict")
OPTIMIZERS = ("adam", "sgd")

TRAIN_FIELDS = {
    'epochs': int, 'batch_size': int, 'lr': float, 'beta1': float, 'beta2': float, 'adam_eps': float,
    'weight_decay': float, 'seed': int, 'loss_eps': float, 'threshold': float, 'metric_eps': float,
    'empty_rule': str, 'optimizer': str, 'augment': bool, 'strict_repro': bool,
}


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


class TrainConfigValidator:
    """Validates the "train" block of a benchmark config"""

    @staticmethod
    def validate_train_config(data: Dict[str, Any]) -> Tuple[bool, str]:
        """Validate training settings against their types and ranges.

        Args:
            data (Dict[str, Any]): Mapping of TrainConfig field names to values. Missing fields
                take their defaults.

        Returns:
            Tuple[bool, str]: (is_valid, message)
        """
        if not isinstance(data, dict):
            return False, "train must be an object"
        for field, value in data.items():
            expected = TRAIN_FIELDS.get(field)
            if expected is None:
                return False, f"Unknown train setting: {field}"
            if expected is int and not _is_int(value):
                return False, f"train.{field} must be an integer"
            if expected is float and not _is_number(value):
                return False, f"train.{field} must be a number"
            if expected is bool and not isinstance(value, bool):
                return False, f"train.{field} must be true or false"
            if expected is str and not isinstance(value, str):
                return False, f"train.{field} must be a string"

        for field in ('epochs', 'batch_size'):
            if field in data and data[field] < 1:
                return False, f"train.{field} must be >= 1"
        for field in ('beta1', 'beta2'):
            if field in data and not 0 < data[field] < 1:
                return False, f"train.{field} must lie in (0, 1)"
        for field in ('adam_eps', 'loss_eps', 'metric_eps', 'lr'):
            if field in data and data[field] <= 0:
                return False, f"train.{field} must be > 0"
        if data.get('weight_decay', 0) < 0:
            return False, "train.weight_decay must be >= 0"
        if 'threshold' in data and not 0 < data['threshold'] < 1:
            return False, "train.threshold must lie in (0, 1)"
        if data.get('empty_rule', 'lenient') not in EMPTY_RULES:
            return False, "Invalid train.empty_rule: Use lenient/strict"
        if data.get('optimizer', 'adam') not in OPTIMIZERS:
            return False, "Invalid train.optimizer: Use adam/sgd"
        return True, "Valid train config"


class BenchmarkConfigValidator:
    """Validates a benchmark matrix config before anything runs"""

    @staticmethod
    def validate_config(data: Dict[str, Any]) -> Tuple[bool, str]:
        """Validate a benchmark config against the documented schema.

        Args:
            data (Dict[str, Any]): Parsed JSON config with experiments, architectures, encoders,
                inits, a dataset source and an optional train block.

        Returns:
            Tuple[bool, str]: (is_valid, message)
        """
        try:
            if not isinstance(data, dict):
                return False, "Config must be a JSON object"

            for field in ('experiments', 'architectures', 'encoders', 'inits'):
                if not isinstance(data.get(field), list) or not data[field]:
                    return False, f"Missing required field: {field} (non-empty list)"

            sources = [key for key in ('dataset', 'datasets', 'synthetic') if data.get(key)]
            if len(sources) != 1:
                return False, "Exactly one of dataset, datasets or synthetic is required"
            if 'datasets' in sources:
                if not isinstance(data['datasets'], dict):
                    return False, "datasets must map experiment names to manifest paths"
                missing = [e for e in data['experiments'] if e not in data['datasets']]
                if missing:
                    return False, f"No dataset for experiment: {missing[0]}"
            if 'synthetic' in sources:
                synthetic = data['synthetic']
                if not isinstance(synthetic, dict) or not _is_int(synthetic.get('n_slices')):
                    return False, "synthetic.n_slices must be an integer"
                if synthetic['n_slices'] < 3:
                    return False, "synthetic.n_slices must be >= 3"

            if 'seed' in data and (not _is_int(data['seed']) or data['seed'] < 0):
                return False, "seed must be a non-negative integer"

            for experiment in data['experiments']:
                if experiment not in EXPERIMENTS:
                    return False, f"Invalid experiment: {experiment}. Use {'/'.join(EXPERIMENTS)}"
            for architecture in data['architectures']:
                if str(architecture).lower() not in ARCHITECTURES:
                    return False, f"Invalid architecture: {architecture}. Use {'/'.join(ARCHITECTURES)}"

            if 'width_scale' in data and (not _is_number(data['width_scale']) or data['width_scale'] <= 0):
                return False, "width_scale must be a positive number"
            for encoder in data['encoders']:
                family = encoder.get('family') if isinstance(encoder, dict) else encoder
                if family not in ENCODER_FAMILIES:
                    return False, f"Invalid encoder: {family}. Use {'/'.join(ENCODER_FAMILIES)}"
                if isinstance(encoder, dict) and 'width_scale' in encoder:
                    if not _is_number(encoder['width_scale']) or encoder['width_scale'] <= 0:
                        return False, f"Encoder {family}: width_scale must be a positive number"

            kinds = []
            for init in data['inits']:
                if not isinstance(init, dict) or init.get('kind') not in INIT_KINDS:
                    return False, "Each init needs kind: random or warmstart"
                if init['kind'] == 'warmstart' and not init.get('checkpoint') and not data.get('pretrain'):
                    return False, "warmstart init needs a checkpoint or a pretrain block"
                if 'seed' in init and not _is_int(init['seed']):
                    return False, "init seed must be an integer"
                kinds.append(init['kind'])
            if len(set(kinds)) != len(kinds):
                return False, "Each init kind may appear only once"

            if data.get('pretrain'):
                pretrain = data['pretrain']
                if not isinstance(pretrain, dict) or pretrain.get('experiment', EXPERIMENTS[0]) not in EXPERIMENTS:
                    return False, "pretrain.experiment must be a known experiment"
                if 'epochs' in pretrain and (not _is_int(pretrain['epochs']) or pretrain['epochs'] < 1):
                    return False, "pretrain.epochs must be >= 1"

            return TrainConfigValidator.validate_train_config(data.get('train', {}))

        except Exception as e:
            return False, f"Validation error: {str(e)}"
