# 時空間加重ニューラルネットワーク システム
