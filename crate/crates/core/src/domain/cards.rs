use std::collections::BTreeMap;

use chrono::{DateTime, Utc};

use super::{
    ActorRef, AuditAction, AuditEntry, CardState, CardUid, DomainError, RfidCard, Roster, StudentCode,
};
use crate::rbac::Role;

/// Result of a card-management operation. `audit` is the single entry the
/// caller must persist alongside the new card state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CardChange {
    pub card: RfidCard,
    /// Other cards of the same student that were blocked as a side effect.
    pub displaced: Vec<RfidCard>,
    pub changed: bool,
    pub audit: AuditEntry,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CardTable {
    cards: BTreeMap<CardUid, RfidCard>,
}

fn require_card_manager(actor: &ActorRef, action: &'static str) -> Result<(), DomainError> {
    match actor.role {
        Role::Admin | Role::Auxiliary => Ok(()),
        role => Err(DomainError::Forbidden { role, action }),
    }
}

impl CardTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, uid: &CardUid) -> Option<&RfidCard> {
        self.cards.get(uid)
    }

    pub fn iter(&self) -> impl Iterator<Item = &RfidCard> {
        self.cards.values()
    }

    pub fn len(&self) -> usize {
        self.cards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cards.is_empty()
    }

    pub fn active_card_of(&self, student: &StudentCode) -> Option<&RfidCard> {
        self.cards
            .values()
            .find(|c| c.state == CardState::Active && c.linked_student.as_ref() == Some(student))
    }

    /// Inserts or replaces a card verbatim (replica refresh, journal replay).
    pub fn upsert(&mut self, card: RfidCard) {
        self.cards.insert(card.uid, card);
    }

    /// Links `uid` to `student` as the student's only active card.
    pub fn enroll_card(
        &mut self,
        uid: CardUid,
        student: &StudentCode,
        roster: &Roster,
        actor: &ActorRef,
        now: DateTime<Utc>,
    ) -> Result<CardChange, DomainError> {
        require_card_manager(actor, "enroll cards")?;
        match roster.get(student) {
            None => return Err(DomainError::UnknownStudent(student.clone())),
            Some(s) if !s.active => return Err(DomainError::InactiveStudent(student.clone())),
            Some(_) => {}
        }
        if let Some(existing) = self.cards.get(&uid) {
            if existing.state == CardState::Active {
                match &existing.linked_student {
                    Some(s) if s == student => {
                        let audit = AuditEntry::new(
                            now,
                            &actor.id,
                            AuditAction::Enroll,
                            uid.to_string(),
                            format!("already enrolled to {student}"),
                        );
                        return Ok(CardChange {
                            card: existing.clone(),
                            displaced: Vec::new(),
                            changed: false,
                            audit,
                        });
                    }
                    Some(other) => {
                        return Err(DomainError::DuplicateUid {
                            uid,
                            student: other.clone(),
                        })
                    }
                    None => {}
                }
            }
        }
        let displaced = self.block_others(student, uid);
        let card = RfidCard {
            uid,
            state: CardState::Active,
            linked_student: Some(student.clone()),
            issued_at: now,
        };
        self.cards.insert(uid, card.clone());
        let mut detail = format!("linked to {student}");
        for d in &displaced {
            detail.push_str(&format!("; blocked previous card {}", d.uid));
        }
        let audit = AuditEntry::new(now, &actor.id, AuditAction::Enroll, uid.to_string(), detail);
        Ok(CardChange {
            card,
            displaced,
            changed: true,
            audit,
        })
    }

    /// Registers a stock card that is not yet linked to anyone.
    pub fn register_unlinked(&mut self, uid: CardUid, now: DateTime<Utc>) -> &RfidCard {
        self.cards.entry(uid).or_insert(RfidCard {
            uid,
            state: CardState::Active,
            linked_student: None,
            issued_at: now,
        })
    }

    /// Blocks or reactivates a card. Reactivating a card blocks any other
    /// active card of the same student.
    pub fn set_card_state(
        &mut self,
        uid: CardUid,
        new_state: CardState,
        actor: &ActorRef,
        now: DateTime<Utc>,
    ) -> Result<CardChange, DomainError> {
        require_card_manager(actor, "change card state")?;
        let current = self.cards.get(&uid).cloned().ok_or(DomainError::UnknownCard(uid))?;
        let action = match new_state {
            CardState::Active => AuditAction::Unblock,
            CardState::Blocked => AuditAction::Block,
        };
        if current.state == new_state {
            let audit = AuditEntry::new(now, &actor.id, action, uid.to_string(), "no change");
            return Ok(CardChange {
                card: current,
                displaced: Vec::new(),
                changed: false,
                audit,
            });
        }
        let displaced = match (&new_state, &current.linked_student) {
            (CardState::Active, Some(student)) => self.block_others(&student.clone(), uid),
            _ => Vec::new(),
        };
        let card = RfidCard {
            state: new_state,
            ..current
        };
        self.cards.insert(uid, card.clone());
        let mut detail = format!("{:?} -> {:?}", current.state, new_state).to_lowercase();
        for d in &displaced {
            detail.push_str(&format!("; blocked previous card {}", d.uid));
        }
        let audit = AuditEntry::new(now, &actor.id, action, uid.to_string(), detail);
        Ok(CardChange {
            card,
            displaced,
            changed: true,
            audit,
        })
    }

    fn block_others(&mut self, student: &StudentCode, keep: CardUid) -> Vec<RfidCard> {
        let mut out = Vec::new();
        for card in self.cards.values_mut() {
            if card.uid != keep
                && card.state == CardState::Active
                && card.linked_student.as_ref() == Some(student)
            {
                card.state = CardState::Blocked;
                out.push(card.clone());
            }
        }
        out
    }

    /// No two active cards for one student. Uid uniqueness is structural.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen = std::collections::HashSet::new();
        for card in self.cards.values() {
            if let (CardState::Active, Some(s)) = (card.state, &card.linked_student) {
                if !seen.insert(s) {
                    return Err(format!("student {s} has more than one active card"));
                }
            }
        }
        Ok(())
    }
}
