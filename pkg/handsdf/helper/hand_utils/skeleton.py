from anytree import NodeMixin, PreOrderIter, TreeError

from handsdf.helper.ext_utils.exceptions import InvalidInputError


class JointNode(NodeMixin):
    def __init__(
        self,
        name,
        index,
        parent=None,
    ):
        super().__init__()
        self.name = name
        self.index = index

        if parent is not None:
            self.parent = parent


def make_tree(joint_parents, joint_names):
    """
    Builds the joint tree and checks it is a single tree rooted at joint 0.

    Returns:
        The root JointNode and the list of nodes indexed by joint.
    """
    count = len(joint_parents)
    if len(joint_names) != count:
        raise InvalidInputError(
            f"{len(joint_names)} joint names for {count} joints",
        )
    if count == 0 or joint_parents[0] != -1:
        raise InvalidInputError("joint 0 must be the root (parent -1)")

    nodes = [JointNode(name, i) for i, name in enumerate(joint_names)]
    for i, parent in enumerate(joint_parents[1:], start=1):
        if not 0 <= parent < count:
            raise InvalidInputError(f"joint {i} has parent {parent} out of range")
        try:
            nodes[i].parent = nodes[parent]
        except TreeError as e:
            raise InvalidInputError(f"joint {i} closes a cycle: {e}") from e

    root = nodes[0]
    unreachable = [n.name for n in nodes if n.root is not root]
    if unreachable:
        raise InvalidInputError(f"joints not reachable from the wrist: {unreachable}")
    return root, nodes


def chain_order(root):
    """Joint indices with every parent listed before its children."""
    return [node.index for node in PreOrderIter(root)]


def subtree_indices(node):
    return [n.index for n in PreOrderIter(node)]


def leaf_indices(nodes):
    return [node.index for node in nodes if node.is_leaf and not node.is_root]


def ancestors_and_self(node):
    """Non-root joints on the path from the wrist down to this joint."""
    return [n.index for n in (*node.ancestors, node) if not n.is_root]
