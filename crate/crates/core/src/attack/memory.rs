//! Best-reward memory for one Remember process.

use crate::image::Image;

/// Holds `r*` and the image attaining it.
///
/// A Remember process starts from the image carried over by the previous
/// Forget step together with its already-known reward. A sampled image
/// displaces that carried entry on ties; after that only a strictly larger
/// reward replaces the stored one.
#[derive(Debug, Clone)]
pub struct Memory {
    best_reward: f64,
    best_image: Image,
    carried: bool,
    /// Consecutive epochs that passed the bound test.
    pub bounded_streak: usize,
}

impl Memory {
    pub fn seeded(image: Image, reward: f64) -> Self {
        Self {
            best_reward: reward,
            best_image: image,
            carried: true,
            bounded_streak: 0,
        }
    }

    pub fn best_reward(&self) -> f64 {
        self.best_reward
    }

    pub fn best_image(&self) -> &Image {
        &self.best_image
    }

    /// True while nothing sampled in this process has been stored.
    pub fn holds_carried(&self) -> bool {
        self.carried
    }

    /// `r* = max(r*, r)`; returns whether the entry was replaced.
    pub fn offer(&mut self, reward: f64, image: &Image) -> bool {
        let take = reward > self.best_reward || (self.carried && reward >= self.best_reward);
        if take {
            self.best_reward = reward;
            self.best_image = image.clone();
            self.carried = false;
        }
        take
    }

    pub fn into_best(self) -> (Image, f64) {
        (self.best_image, self.best_reward)
    }
}
