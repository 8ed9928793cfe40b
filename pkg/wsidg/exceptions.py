class WSIDGError(Exception):
    pass


class RejectedInputError(WSIDGError, ValueError):
    pass


class IllegalAssignmentError(WSIDGError):
    pass


class UngroupableWSIError(WSIDGError):
    """
    Raised when a BoVW vector is requested for a WSI without a single
    non-tumor style feature.
    """
    def __init__(self, wsi_id):
        super(UngroupableWSIError, self).__init__(
            'WSI {} has no non-tumor patches and cannot be grouped'.format(wsi_id)
        )
        self.wsi_id = wsi_id


class DegeneratePrototypeError(WSIDGError):
    def __init__(self, wsi_id, label):
        super(DegeneratePrototypeError, self).__init__(
            'Prototype for WSI {} class {} has a zero mean vector'.format(wsi_id, label)
        )
        self.wsi_id = wsi_id
        self.label = label


class SamplingInfeasibleError(WSIDGError):
    """
    Raised when no WSI pair satisfies the pairing rule. *populations* maps
    cluster id to the number of eligible WSIs in it.
    """
    def __init__(self, message, populations):
        super(SamplingInfeasibleError, self).__init__(
            '{} (eligible WSIs per cluster: {})'.format(message, populations)
        )
        self.populations = populations


class NonFiniteLossError(WSIDGError):
    def __init__(self, step, replay_path):
        super(NonFiniteLossError, self).__init__(
            'Non-finite loss at step {}; batch saved to {}'.format(step, replay_path)
        )
        self.step = step
        self.replay_path = replay_path


class CheckpointMismatchError(WSIDGError):
    pass


class MissingArtifactError(WSIDGError, FileNotFoundError):
    def __init__(self, what, path):
        super(MissingArtifactError, self).__init__(
            '{} not found at {}'.format(what, path)
        )
        self.path = path


class ObjectiveIncreaseError(WSIDGError):
    """
    Raised when a Lloyd iteration increases the k-means objective.
    """
    def __init__(self, before, after):
        super(ObjectiveIncreaseError, self).__init__(
            'k-means objective increased ({} -> {})'.format(before, after)
        )
        self.before = before
        self.after = after
