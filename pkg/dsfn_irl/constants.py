"""
Physical constants of the classic-control benchmarks. Values follow the
reference implementations in OpenAI Gym's `gym/envs/classic_control`
(mountain_car.py, cartpole.py, acrobot.py) and the registration entries in
`gym/envs/__init__.py` (episode caps and reward thresholds).
"""
import math

# MountainCar-v0 (gym/envs/classic_control/mountain_car.py)
MOUNTAINCAR_MIN_POSITION = -1.2
MOUNTAINCAR_MAX_POSITION = 0.6
MOUNTAINCAR_MAX_SPEED = 0.07
MOUNTAINCAR_GOAL_POSITION = 0.5
MOUNTAINCAR_GOAL_VELOCITY = 0.
MOUNTAINCAR_FORCE = 0.001
MOUNTAINCAR_GRAVITY = 0.0025
MOUNTAINCAR_INITIAL_POSITION = (-0.6, -0.4)
MOUNTAINCAR_MAX_EPISODE_STEPS = 200  # gym/envs/__init__.py
MOUNTAINCAR_REWARD_THRESHOLD = -110.  # gym/envs/__init__.py

# CartPole-v0 (gym/envs/classic_control/cartpole.py)
CARTPOLE_GRAVITY = 9.8
CARTPOLE_MASS_CART = 1.0
CARTPOLE_MASS_POLE = 0.1
CARTPOLE_TOTAL_MASS = CARTPOLE_MASS_CART + CARTPOLE_MASS_POLE
CARTPOLE_LENGTH = 0.5  # actually half the pole's length
CARTPOLE_POLEMASS_LENGTH = CARTPOLE_MASS_POLE * CARTPOLE_LENGTH
CARTPOLE_FORCE_MAG = 10.0
CARTPOLE_TAU = 0.02  # seconds between state updates, explicit Euler
CARTPOLE_THETA_THRESHOLD = 12 * 2 * math.pi / 360
CARTPOLE_X_THRESHOLD = 2.4
CARTPOLE_INITIAL_BOUND = 0.05
CARTPOLE_MAX_EPISODE_STEPS = 200  # gym/envs/__init__.py
CARTPOLE_REWARD_THRESHOLD = 195.  # gym/envs/__init__.py

# Acrobot-v1 (gym/envs/classic_control/acrobot.py, "book" dynamics)
ACROBOT_DT = 0.2
ACROBOT_LINK_LENGTH_1 = 1.
ACROBOT_LINK_MASS_1 = 1.
ACROBOT_LINK_MASS_2 = 1.
ACROBOT_LINK_COM_POS_1 = 0.5
ACROBOT_LINK_COM_POS_2 = 0.5
ACROBOT_LINK_MOI = 1.
ACROBOT_GRAVITY = 9.8
ACROBOT_MAX_VEL_1 = 4 * math.pi
ACROBOT_MAX_VEL_2 = 9 * math.pi
ACROBOT_AVAIL_TORQUE = (-1., 0., 1.)
ACROBOT_INITIAL_BOUND = 0.1
ACROBOT_MAX_EPISODE_STEPS = 500  # gym/envs/__init__.py
ACROBOT_REWARD_THRESHOLD = -100.  # gym/envs/__init__.py

# 5x5 gridworld used as an exact dynamic-programming oracle. Not a gym
# environment. Actions: 0 up, 1 right, 2 down, 3 left.
GRIDWORLD_SIZE = 5
GRIDWORLD_START = (0, 0)
GRIDWORLD_GOAL = (4, 4)
GRIDWORLD_LAVA = ((1, 1), (2, 2), (3, 3))
GRIDWORLD_MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))
GRIDWORLD_MAX_EPISODE_STEPS = 50
GRIDWORLD_GAMMA = 0.9
# Ground-truth reward weights over the gridworld features
# (enters goal, standing in lava, bias).
GRIDWORLD_TRUE_WEIGHTS = (1., -1., 0.)
