"""Loaded DiCE: any-order policy-gradient estimators with advantages.

Modules:

``autodiff``     scalar reverse-mode AD with nested derivatives and magic box
``mdp``          tabular MDPs, softmax policies, trajectory sampling
``oracle``       analytic values, true derivatives, trajectory enumeration
``advantage``    GAE and discounted returns
``estimators``   DiCE, DiCE with baseline, LVC and Loaded DiCE objectives
``experiments``  Monte-Carlo bias / std / correlation sweeps
``metademo``     tabular MAML through a Loaded DiCE inner step
``cli``          command-line front end
"""

__version__ = "0.1.0"
